//! Model formulas of the form `y ~ a * (b + c) + I(d^2)` and the design
//! matrices they expand to.
//!
//! Grammar (`:` binds tighter than `*`, which binds tighter than `+`):
//!
//! ```text
//! formula := ident "~" sum
//! sum     := cross ("+" cross)*
//! cross   := inter ("*" inter)*
//! inter   := atom (":" atom)*
//! atom    := ident | "I(" ident "^" int ")" | "(" sum ")" | "1"
//! ```
//!
//! An intercept is always present. Categorical variables use reference-cell
//! coding with the first (sorted) level dropped.

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tabular::{Column, ColumnKind, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub enum TermExpr {
    /// The literal `1`; the intercept is implicit so this adds nothing.
    One,
    Var(String),
    Power(String, u32),
    Interact(Box<TermExpr>, Box<TermExpr>),
    Cross(Box<TermExpr>, Box<TermExpr>),
    Sum(Box<TermExpr>, Box<TermExpr>),
    Group(Box<TermExpr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormulaAst {
    pub response: String,
    pub rhs: TermExpr,
}

/// One variable inside a term, `power == 1` for a plain variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Factor {
    pub var: String,
    pub power: u32,
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.power == 1 {
            write!(f, "{}", self.var)
        } else {
            write!(f, "I({}^{})", self.var, self.power)
        }
    }
}

/// An expanded model term: the interaction of its factors.
#[derive(Debug, Clone)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    fn key(&self) -> Vec<(String, u32)> {
        let mut k: Vec<_> = self.factors.iter().map(|f| (f.var.clone(), f.power)).collect();
        k.sort();
        k
    }

    pub fn involves(&self, var: &str) -> bool {
        self.factors.iter().any(|f| f.var == var)
    }

    fn interact(&self, other: &Term) -> Term {
        let mut factors = self.factors.clone();
        for f in &other.factors {
            if !factors.contains(f) {
                factors.push(f.clone());
            }
        }
        Term { factors }
    }
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(Factor::to_string).collect();
        write!(f, "{}", parts.join(":"))
    }
}

fn union(mut a: Vec<Term>, b: Vec<Term>) -> Vec<Term> {
    for t in b {
        if !a.contains(&t) {
            a.push(t);
        }
    }
    a
}

fn interact_all(a: &[Term], b: &[Term]) -> Vec<Term> {
    let mut out = Vec::new();
    for tb in b {
        for ta in a {
            out = union(out, vec![ta.interact(tb)]);
        }
    }
    out
}

impl TermExpr {
    fn expand(&self) -> Vec<Term> {
        match self {
            TermExpr::One => Vec::new(),
            TermExpr::Var(v) => vec![Term {
                factors: vec![Factor {
                    var: v.clone(),
                    power: 1,
                }],
            }],
            TermExpr::Power(v, k) => vec![Term {
                factors: vec![Factor {
                    var: v.clone(),
                    power: *k,
                }],
            }],
            TermExpr::Group(e) => e.expand(),
            TermExpr::Sum(a, b) => union(a.expand(), b.expand()),
            TermExpr::Interact(a, b) => interact_all(&a.expand(), &b.expand()),
            TermExpr::Cross(a, b) => {
                let (ta, tb) = (a.expand(), b.expand());
                let inter = interact_all(&ta, &tb);
                union(union(ta, tb), inter)
            }
        }
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            TermExpr::One => {}
            TermExpr::Var(v) | TermExpr::Power(v, _) => {
                if !out.contains(&v.as_str()) {
                    out.push(v);
                }
            }
            TermExpr::Group(e) => e.collect_vars(out),
            TermExpr::Sum(a, b) | TermExpr::Interact(a, b) | TermExpr::Cross(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }
}

impl fmt::Display for TermExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermExpr::One => write!(f, "1"),
            TermExpr::Var(v) => write!(f, "{v}"),
            TermExpr::Power(v, k) => write!(f, "I({v}^{k})"),
            TermExpr::Interact(a, b) => write!(f, "{a}:{b}"),
            TermExpr::Cross(a, b) => write!(f, "{a} * {b}"),
            TermExpr::Sum(a, b) => write!(f, "{a} + {b}"),
            TermExpr::Group(e) => write!(f, "({e})"),
        }
    }
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ {}", self.response, self.rhs)
    }
}

impl FormulaAst {
    /// Expanded terms: main effects first, then interactions by increasing
    /// order, each group in left-to-right order of appearance.
    pub fn terms(&self) -> Vec<Term> {
        let mut terms = self.rhs.expand();
        terms.sort_by_key(|t| t.factors.len());
        terms
    }

    pub fn variables(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.rhs.collect_vars(&mut out);
        out
    }

    pub fn involves(&self, var: &str) -> bool {
        self.variables().contains(&var)
    }

    /// Formula over an explicit term list.
    pub fn from_terms(response: &str, terms: &[Term]) -> FormulaAst {
        let rhs = terms
            .iter()
            .map(|t| {
                t.factors
                    .iter()
                    .map(|f| match f.power {
                        1 => TermExpr::Var(f.var.clone()),
                        k => TermExpr::Power(f.var.clone(), k),
                    })
                    .reduce(|a, b| TermExpr::Interact(Box::new(a), Box::new(b)))
                    .expect("terms have at least one factor")
            })
            .reduce(|a, b| TermExpr::Sum(Box::new(a), Box::new(b)))
            .unwrap_or(TermExpr::One);
        FormulaAst {
            response: response.to_owned(),
            rhs,
        }
    }

    /// The formula with every term involving `var` removed.
    pub fn without_variable(&self, var: &str) -> FormulaAst {
        let kept: Vec<Term> = self.terms().into_iter().filter(|t| !t.involves(var)).collect();
        FormulaAst::from_terms(&self.response, &kept)
    }

    /// Same right-hand side, different response.
    pub fn with_response(&self, response: &str) -> FormulaAst {
        FormulaAst {
            response: response.to_owned(),
            rhs: self.rhs.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u32),
    Tilde,
    Plus,
    Star,
    Colon,
    Caret,
    LParen,
    RParen,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(Tok, usize)>> {
        let mut lx = Lexer {
            src,
            toks: Vec::new(),
        };
        let bytes = src.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            let start = i;
            match c {
                ' ' | '\t' | '\n' | '\r' => {
                    i += 1;
                    continue;
                }
                '~' => lx.push(Tok::Tilde, start),
                '+' => lx.push(Tok::Plus, start),
                '*' => lx.push(Tok::Star, start),
                ':' => lx.push(Tok::Colon, start),
                '^' => lx.push(Tok::Caret, start),
                '(' => lx.push(Tok::LParen, start),
                ')' => lx.push(Tok::RParen, start),
                '-' => {
                    return Err(Error::Unsupported {
                        offset: start,
                        feature: "term removal with `-`".into(),
                    })
                }
                '/' | '%' | '|' | '.' if c != '.' || !next_is_ident(bytes, i) => {
                    return Err(Error::Unsupported {
                        offset: start,
                        feature: format!("operator `{c}`"),
                    })
                }
                _ if c.is_ascii_digit() => {
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    if i < bytes.len() && bytes[i] == b'.' {
                        return Err(Error::Syntax {
                            offset: start,
                            message: "only integer literals are allowed".into(),
                        });
                    }
                    let v = lx.src[start..i].parse::<u32>().map_err(|_| Error::Syntax {
                        offset: start,
                        message: "integer literal out of range".into(),
                    })?;
                    lx.toks.push((Tok::Int(v), start));
                    continue;
                }
                _ if c.is_ascii_alphabetic() || c == '_' || c == '.' => {
                    while i < bytes.len()
                        && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.')
                    {
                        i += 1;
                    }
                    lx.toks.push((Tok::Ident(lx.src[start..i].to_owned()), start));
                    continue;
                }
                _ => {
                    return Err(Error::Syntax {
                        offset: start,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            }
            i += 1;
        }
        lx.toks.push((Tok::End, src.len()));
        Ok(lx.toks)
    }

    fn push(&mut self, t: Tok, at: usize) {
        self.toks.push((t, at));
    }
}

fn next_is_ident(bytes: &[u8], i: usize) -> bool {
    bytes
        .get(i + 1)
        .is_some_and(|b| b.is_ascii_alphanumeric() || *b == b'_')
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if t != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn error(&self, message: String) -> Error {
        Error::Syntax {
            offset: self.offset(),
            message,
        }
    }

    fn sum(&mut self) -> Result<TermExpr> {
        let mut lhs = self.cross()?;
        while *self.peek() == Tok::Plus {
            self.bump();
            let rhs = self.cross()?;
            lhs = TermExpr::Sum(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn cross(&mut self) -> Result<TermExpr> {
        let mut lhs = self.inter()?;
        while *self.peek() == Tok::Star {
            self.bump();
            let rhs = self.inter()?;
            lhs = TermExpr::Cross(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn inter(&mut self) -> Result<TermExpr> {
        let mut lhs = self.atom()?;
        while *self.peek() == Tok::Colon {
            self.bump();
            let rhs = self.atom()?;
            lhs = TermExpr::Interact(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<TermExpr> {
        let at = self.offset();
        match self.bump() {
            Tok::Ident(name) if name == "I" && *self.peek() == Tok::LParen => {
                self.bump();
                let var = match self.bump() {
                    Tok::Ident(v) => v,
                    _ => return Err(Error::Syntax {
                        offset: self.toks[self.pos.saturating_sub(1)].1,
                        message: "expected a variable inside I()".into(),
                    }),
                };
                if *self.peek() != Tok::Caret {
                    return Err(Error::Unsupported {
                        offset: at,
                        feature: "I() only supports `I(var^k)`".into(),
                    });
                }
                self.bump();
                let k_at = self.offset();
                let k = match self.bump() {
                    Tok::Int(k) if k >= 1 => k,
                    Tok::Int(_) => {
                        return Err(Error::Syntax {
                            offset: k_at,
                            message: "power must be a positive integer".into(),
                        })
                    }
                    _ => {
                        return Err(Error::Syntax {
                            offset: k_at,
                            message: "expected an integer exponent".into(),
                        })
                    }
                };
                self.expect(Tok::RParen, "`)` closing I()")?;
                Ok(if k == 1 {
                    TermExpr::Var(var)
                } else {
                    TermExpr::Power(var, k)
                })
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    return Err(Error::Unsupported {
                        offset: at,
                        feature: format!("function call `{name}()`"),
                    });
                }
                Ok(TermExpr::Var(name))
            }
            Tok::Int(1) => Ok(TermExpr::One),
            Tok::Int(_) => Err(Error::Unsupported {
                offset: at,
                feature: "intercept removal or numeric terms".into(),
            }),
            Tok::LParen => {
                let inner = self.sum()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(TermExpr::Group(Box::new(inner)))
            }
            Tok::Caret => Err(Error::Unsupported {
                offset: at,
                feature: "`^` outside I()".into(),
            }),
            Tok::End => Err(Error::Syntax {
                offset: at,
                message: "unexpected end of formula".into(),
            }),
            t => Err(Error::Syntax {
                offset: at,
                message: format!("unexpected token {t:?}"),
            }),
        }
    }
}

/// Parse `response ~ terms`.
pub fn parse(text: &str) -> Result<FormulaAst> {
    let toks = Lexer::run(text)?;
    let mut p = Parser { toks, pos: 0 };
    let response = match p.bump() {
        Tok::Ident(r) => r,
        _ => return Err(Error::Syntax {
            offset: 0,
            message: "formula must start with a response variable".into(),
        }),
    };
    p.expect(Tok::Tilde, "`~`")?;
    let rhs = p.sum()?;
    if *p.peek() != Tok::End {
        return Err(p.error("unexpected trailing input".into()));
    }
    let ast = FormulaAst { response, rhs };
    if ast.involves(&ast.response) {
        return Err(Error::Syntax {
            offset: 0,
            message: format!("response `{}` appears among the terms", ast.response),
        });
    }
    Ok(ast)
}

// ---------------------------------------------------------------------------
// Design matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum VarSchema {
    Numeric,
    Categorical(Vec<String>),
}

/// The expansion rules of a formula bound to the schema of the dataset it was
/// first built on. Reapplying it to another dataset with the same schema
/// yields the same columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignBuilder {
    terms: Vec<Term>,
    schema: HashMap<String, VarSchema>,
    column_names: Vec<String>,
}

/// One factor evaluated on a dataset: a block of columns with their labels.
struct Block {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

impl DesignBuilder {
    fn new(ast: &FormulaAst, ds: &Dataset) -> Result<Self> {
        let terms = ast.terms();
        let mut schema = HashMap::new();
        for t in &terms {
            for f in &t.factors {
                let col = ds.column(&f.var)?;
                let s = match col {
                    Column::Numeric(_) => VarSchema::Numeric,
                    Column::Categorical { levels, .. } => {
                        if f.power != 1 {
                            return Err(Error::ColumnKind {
                                column: f.var.clone(),
                                expected: "numeric inside I()",
                            });
                        }
                        VarSchema::Categorical(levels.clone())
                    }
                };
                schema.insert(f.var.clone(), s);
            }
        }
        let mut b = DesignBuilder {
            terms,
            schema,
            column_names: Vec::new(),
        };
        b.column_names = b.evaluate(ds)?.0;
        Ok(b)
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn ncols(&self) -> usize {
        self.column_names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Indices of columns generated by terms that involve `var`.
    pub fn columns_involving(&self, var: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut col = 1;
        for t in &self.terms {
            let width = self.term_width(t);
            if t.involves(var) {
                out.extend(col..col + width);
            }
            col += width;
        }
        out
    }

    fn term_width(&self, t: &Term) -> usize {
        t.factors
            .iter()
            .map(|f| match &self.schema[&f.var] {
                VarSchema::Numeric => 1,
                VarSchema::Categorical(l) => l.len().saturating_sub(1),
            })
            .product()
    }

    fn block(&self, f: &Factor, ds: &Dataset) -> Result<Block> {
        let col = ds.column(&f.var)?;
        match (&self.schema[&f.var], col) {
            (VarSchema::Numeric, Column::Numeric(v)) => {
                let vals = if f.power == 1 {
                    v.clone()
                } else {
                    v.iter().map(|x| x.powi(f.power as i32)).collect()
                };
                Ok(Block {
                    names: vec![f.to_string()],
                    cols: vec![vals],
                })
            }
            (VarSchema::Categorical(levels), Column::Categorical { levels: lv, codes }) => {
                // Map this dataset's level codes onto the original level list.
                let mut remap = Vec::with_capacity(lv.len());
                for l in lv {
                    remap.push(levels.iter().position(|x| x == l));
                }
                let mut cols = vec![vec![0.0; codes.len()]; levels.len().saturating_sub(1)];
                for (i, &c) in codes.iter().enumerate() {
                    match remap[c as usize] {
                        Some(0) => {}
                        Some(k) => cols[k - 1][i] = 1.0,
                        None => {
                            return Err(Error::UnseenLevel {
                                column: f.var.clone(),
                                level: lv[c as usize].clone(),
                            })
                        }
                    }
                }
                let names = levels[1..].iter().map(|l| format!("{}{}", f.var, l)).collect();
                Ok(Block { names, cols })
            }
            (expected, got) => Err(Error::SchemaMismatch {
                column: f.var.clone(),
                detail: format!(
                    "expected {}, found {:?}",
                    match expected {
                        VarSchema::Numeric => "numeric",
                        VarSchema::Categorical(_) => "categorical",
                    },
                    got.kind()
                ),
            }),
        }
    }

    fn evaluate(&self, ds: &Dataset) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
        let n = ds.n_rows();
        let mut names = vec!["(Intercept)".to_owned()];
        let mut cols = vec![vec![1.0; n]];
        for t in &self.terms {
            let mut acc = Block {
                names: vec![String::new()],
                cols: vec![vec![1.0; n]],
            };
            for f in &t.factors {
                let b = self.block(f, ds)?;
                // Earlier factors vary fastest within the term's columns.
                let mut next = Block {
                    names: Vec::new(),
                    cols: Vec::new(),
                };
                for (bn, bc) in b.names.iter().zip(&b.cols) {
                    for (an, ac) in acc.names.iter().zip(&acc.cols) {
                        next.names.push(if an.is_empty() {
                            bn.clone()
                        } else {
                            format!("{an}:{bn}")
                        });
                        next.cols.push(ac.iter().zip(bc).map(|(x, y)| x * y).collect());
                    }
                }
                acc = next;
            }
            names.extend(acc.names);
            cols.extend(acc.cols);
        }
        Ok((names, cols))
    }

    /// Apply the bound expansion to `ds`.
    pub fn rebuild(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        let (_, cols) = self.evaluate(ds)?;
        let n = ds.n_rows();
        let p = cols.len();
        let mut m = DMatrix::zeros(n, p);
        for (j, c) in cols.iter().enumerate() {
            m.column_mut(j).copy_from_slice(c);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub builder: DesignBuilder,
}

impl DesignMatrix {
    pub fn column_names(&self) -> &[String] {
        self.builder.column_names()
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn rebuild(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        self.builder.rebuild(ds)
    }
}

/// Expand `ast` on `ds`: intercept first, then every term's columns.
pub fn build_design(ast: &FormulaAst, ds: &Dataset) -> Result<DesignMatrix> {
    let builder = DesignBuilder::new(ast, ds)?;
    let matrix = builder.rebuild(ds)?;
    let mut seen = std::collections::HashSet::new();
    for name in builder.column_names() {
        if !seen.insert(name) {
            return Err(Error::InvalidInput(format!(
                "duplicate design column `{name}`"
            )));
        }
    }
    Ok(DesignMatrix { matrix, builder })
}

/// Free-function form of [`DesignMatrix::rebuild`].
pub fn rebuild(design: &DesignMatrix, ds: &Dataset) -> Result<DMatrix<f64>> {
    design.rebuild(ds)
}

#[allow(dead_code)]
fn kind_name(k: ColumnKind) -> &'static str {
    match k {
        ColumnKind::Numeric => "numeric",
        ColumnKind::Categorical => "categorical",
    }
}
