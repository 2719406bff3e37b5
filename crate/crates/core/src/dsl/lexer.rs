use super::ast::Span;
use super::Diagnostic;

#[derive(Clone, Debug, PartialEq)]
pub enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    /// Number immediately followed by `s`, e.g. `2.5s`.
    Seconds(f64),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Semi,
    Colon,
    Comma,
    Dot,
    At,
    Assign,
    Amp,
    Pipe,
    Bang,
    Cmp(&'static str),
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Num(n) => format!("number {n}"),
            Tok::Seconds(n) => format!("duration {n}s"),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Dot => "`.`".into(),
            Tok::At => "`@`".into(),
            Tok::Assign => "`=`".into(),
            Tok::Amp => "`&`".into(),
            Tok::Pipe => "`|`".into(),
            Tok::Bang => "`!`".into(),
            Tok::Cmp(op) => format!("`{op}`"),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, Diagnostic> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);

    macro_rules! bump {
        () => {{
            if chars[i] == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < chars.len() {
        let c = chars[i];
        let span = Span::new(line, col);
        if c.is_whitespace() {
            bump!();
            continue;
        }
        if c == '#' || (c == '/' && chars.get(i + 1) == Some(&'/')) {
            while i < chars.len() && chars[i] != '\n' {
                bump!();
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                bump!();
            }
            out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), span });
            continue;
        }
        let negative_number = c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
        if c.is_ascii_digit() || negative_number {
            let start = i;
            bump!();
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                bump!();
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let save = (i, line, col);
                bump!();
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    bump!();
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        bump!();
                    }
                } else {
                    (i, line, col) = save;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value: f64 = text
                .parse()
                .map_err(|_| Diagnostic::new(span, format!("malformed number `{text}`")))?;
            let followed_by_s = i < chars.len()
                && chars[i] == 's'
                && !chars.get(i + 1).is_some_and(|d| d.is_ascii_alphanumeric() || *d == '_');
            if followed_by_s {
                bump!();
                out.push(Token { tok: Tok::Seconds(value), span });
            } else {
                out.push(Token { tok: Tok::Num(value), span });
            }
            continue;
        }
        if c == '"' {
            bump!();
            let mut s = String::new();
            loop {
                if i >= chars.len() {
                    return Err(Diagnostic::new(span, "unterminated string literal"));
                }
                let ch = chars[i];
                bump!();
                match ch {
                    '"' => break,
                    '\\' => {
                        let esc = *chars
                            .get(i)
                            .ok_or_else(|| Diagnostic::new(span, "unterminated string literal"))?;
                        let esc_span = Span::new(line, col);
                        bump!();
                        match esc {
                            '"' => s.push('"'),
                            '\\' => s.push('\\'),
                            'n' => s.push('\n'),
                            't' => s.push('\t'),
                            'r' => s.push('\r'),
                            '0' => s.push('\0'),
                            '\'' => s.push('\''),
                            'u' => {
                                if chars.get(i) != Some(&'{') {
                                    return Err(Diagnostic::new(esc_span, "expected `{` after \\u"));
                                }
                                bump!();
                                let mut hex = String::new();
                                while i < chars.len() && chars[i] != '}' {
                                    hex.push(chars[i]);
                                    bump!();
                                }
                                if i >= chars.len() {
                                    return Err(Diagnostic::new(esc_span, "unterminated unicode escape"));
                                }
                                bump!();
                                let ch = u32::from_str_radix(&hex, 16)
                                    .ok()
                                    .and_then(char::from_u32)
                                    .ok_or_else(|| Diagnostic::new(esc_span, format!("invalid unicode escape `{hex}`")))?;
                                s.push(ch);
                            }
                            other => {
                                return Err(Diagnostic::new(esc_span, format!("unknown escape `\\{other}`")));
                            }
                        }
                    }
                    other => s.push(other),
                }
            }
            out.push(Token { tok: Tok::Str(s), span });
            continue;
        }
        let next = chars.get(i + 1).copied();
        let (tok, width) = match (c, next) {
            ('=', Some('=')) => (Tok::Cmp("=="), 2),
            ('!', Some('=')) => (Tok::Cmp("!="), 2),
            ('<', Some('=')) => (Tok::Cmp("<="), 2),
            ('>', Some('=')) => (Tok::Cmp(">="), 2),
            ('<', _) => (Tok::Cmp("<"), 1),
            ('>', _) => (Tok::Cmp(">"), 1),
            ('=', _) => (Tok::Assign, 1),
            ('!', _) => (Tok::Bang, 1),
            ('&', Some('&')) => (Tok::Amp, 2),
            ('|', Some('|')) => (Tok::Pipe, 2),
            ('&', _) => (Tok::Amp, 1),
            ('|', _) => (Tok::Pipe, 1),
            ('{', _) => (Tok::LBrace, 1),
            ('}', _) => (Tok::RBrace, 1),
            ('(', _) => (Tok::LParen, 1),
            (')', _) => (Tok::RParen, 1),
            ('[', _) => (Tok::LBracket, 1),
            (']', _) => (Tok::RBracket, 1),
            (';', _) => (Tok::Semi, 1),
            (':', _) => (Tok::Colon, 1),
            (',', _) => (Tok::Comma, 1),
            ('.', _) => (Tok::Dot, 1),
            ('@', _) => (Tok::At, 1),
            (other, _) => return Err(Diagnostic::new(span, format!("unexpected character `{other}`"))),
        };
        for _ in 0..width {
            bump!();
        }
        out.push(Token { tok, span });
    }
    out.push(Token { tok: Tok::Eof, span: Span::new(line, col) });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(src: &str) -> Vec<Tok> {
        tokenize(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn numbers_and_seconds() {
        assert_eq!(toks("5 2.5s -3 1e3"), vec![Tok::Num(5.0), Tok::Seconds(2.5), Tok::Num(-3.0), Tok::Num(1000.0), Tok::Eof]);
    }

    #[test]
    fn operators_and_comments() {
        let t = toks("a.b >= 2 # trailing\n& !c");
        assert_eq!(t[3], Tok::Cmp(">="));
        assert_eq!(t[5], Tok::Amp);
        assert_eq!(t[6], Tok::Bang);
    }

    #[test]
    fn string_escapes() {
        assert_eq!(toks(r#""a\"b\u{1b}""#)[0], Tok::Str("a\"b\u{1b}".into()));
    }

    #[test]
    fn positions_are_one_based() {
        let t = tokenize("\n  foo").unwrap();
        assert_eq!((t[0].span.line, t[0].span.col), (2, 3));
    }

    #[test]
    fn bad_character_reports_position() {
        let err = tokenize("a\n $").unwrap_err();
        assert_eq!((err.span.line, err.span.col), (2, 2));
    }
}
