use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Kind {
    /// `%name`, `%0`, `%"quoted name"`
    Local,
    /// `@name`
    Global,
    /// `!dbg`, `!12`, `!` (before `{` or a string)
    Metadata,
    /// `#0`, `#dbg_value`
    Hash,
    Int,
    Float,
    /// `c"..."` or `"..."`
    Str,
    Word,
    /// `name:` at the start of a block
    LabelDef,
    Punct,
    Newline,
    Comment,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub kind: Kind,
    pub text: String,
    pub line: usize,
    pub column: usize,
    /// Byte offset into the source text.
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn is_punct(&self, p: &str) -> bool {
        self.kind == Kind::Punct && self.text == p
    }

    pub fn is_word(&self, w: &str) -> bool {
        self.kind == Kind::Word && self.text == w
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '-')
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.text[self.pos..].chars().nth(n)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn eat_while(&mut self, f: impl Fn(char) -> bool) {
        while self.peek().is_some_and(&f) {
            self.bump();
        }
    }

    fn error(&self, line: usize, column: usize, message: impl Into<String>) -> Error {
        Error::Parse { line, column, message: message.into() }
    }

    fn eat_quoted(&mut self, line: usize, column: usize) -> Result<()> {
        // opening quote already consumed
        loop {
            match self.bump() {
                Some('"') => return Ok(()),
                Some('\n') | None => return Err(self.error(line, column, "unterminated string literal")),
                Some(_) => {}
            }
        }
    }
}

pub(crate) fn lex(text: &str) -> Result<Vec<Token>> {
    let mut cur = Cursor { text, pos: 0, line: 1, col: 1 };
    let mut out = Vec::new();
    while let Some(c) = cur.peek() {
        let (line, column, start) = (cur.line, cur.col, cur.pos);
        let kind = match c {
            '\n' => {
                cur.bump();
                Kind::Newline
            }
            c if c.is_whitespace() => {
                cur.bump();
                continue;
            }
            ';' => {
                cur.eat_while(|c| c != '\n');
                Kind::Comment
            }
            '%' | '@' => {
                cur.bump();
                if cur.peek() == Some('"') {
                    cur.bump();
                    cur.eat_quoted(line, column)?;
                } else {
                    let before = cur.pos;
                    cur.eat_while(is_ident_char);
                    if cur.pos == before {
                        return Err(cur.error(line, column, format!("bare `{c}`")));
                    }
                }
                if c == '%' {
                    Kind::Local
                } else {
                    Kind::Global
                }
            }
            '!' => {
                cur.bump();
                cur.eat_while(is_ident_char);
                Kind::Metadata
            }
            '#' => {
                cur.bump();
                cur.eat_while(is_ident_char);
                Kind::Hash
            }
            '"' => {
                cur.bump();
                cur.eat_quoted(line, column)?;
                label_or(&mut cur, Kind::Str)
            }
            'c' if cur.peek_at(1) == Some('"') => {
                cur.bump();
                cur.bump();
                cur.eat_quoted(line, column)?;
                Kind::Str
            }
            '-' | '0'..='9' => lex_number(&mut cur, line, column)?,
            c if c.is_ascii_alphabetic() || matches!(c, '_' | '.' | '$') => {
                cur.eat_while(is_ident_char);
                label_or(&mut cur, Kind::Word)
            }
            ',' | '(' | ')' | '[' | ']' | '{' | '}' | '<' | '>' | '=' | '*' | ':' | '|' => {
                cur.bump();
                Kind::Punct
            }
            other => return Err(cur.error(line, column, format!("unexpected character `{other}`"))),
        };
        out.push(Token { kind, text: text[start..cur.pos].to_string(), line, column, start, end: cur.pos });
    }
    Ok(out)
}

/// A word or number immediately followed by `:` defines a block label.
fn label_or(cur: &mut Cursor<'_>, kind: Kind) -> Kind {
    if cur.peek() == Some(':') {
        cur.bump();
        Kind::LabelDef
    } else {
        kind
    }
}

fn lex_number(cur: &mut Cursor<'_>, line: usize, column: usize) -> Result<Kind> {
    if cur.peek() == Some('-') {
        cur.bump();
        if !cur.peek().is_some_and(|c| c.is_ascii_digit()) {
            return Err(cur.error(line, column, "`-` not followed by a digit"));
        }
    }
    if cur.peek() == Some('0') && cur.peek_at(1) == Some('x') {
        // hexadecimal floating point constant, optionally with a kind letter
        cur.bump();
        cur.bump();
        cur.eat_while(|c| c.is_ascii_hexdigit() || matches!(c, 'K' | 'L' | 'M' | 'H' | 'R'));
        return Ok(Kind::Float);
    }
    cur.eat_while(|c| c.is_ascii_digit());
    let mut float = false;
    if cur.peek() == Some('.')
        && cur
            .peek_at(1)
            .is_some_and(|c| c.is_ascii_digit() || c == 'e' || c == 'E' || c.is_whitespace() || c == ',' || c == ')')
    {
        float = true;
        cur.bump();
        cur.eat_while(|c| c.is_ascii_digit());
    }
    if matches!(cur.peek(), Some('e' | 'E'))
        && cur.peek_at(1).is_some_and(|c| c.is_ascii_digit() || c == '+' || c == '-')
    {
        float = true;
        cur.bump();
        if matches!(cur.peek(), Some('+' | '-')) {
            cur.bump();
        }
        cur.eat_while(|c| c.is_ascii_digit());
    }
    // numeric block label, e.g. `3:`
    if !float && cur.peek() == Some(':') {
        cur.bump();
        return Ok(Kind::LabelDef);
    }
    if cur.peek().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
        return Err(cur.error(line, column, "malformed numeric literal"));
    }
    Ok(if float { Kind::Float } else { Kind::Int })
}
