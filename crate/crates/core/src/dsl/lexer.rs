use super::{ParseError, ParseErrorKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Str(String),
    /// Numeric literal, kept as written so integer contexts can reject fractions.
    Number(String),
    If,
    Else,
    Return,
    And,
    Or,
    Not,
    True,
    False,
    Assign,
    EqEq,
    NotEq,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Dot,
    Colon,
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

fn lex_err(line: usize, col: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        kind: ParseErrorKind::Lexical,
        line,
        col,
        message: message.into(),
    }
}

/// Splits source text into tokens, emitting `Indent`/`Dedent` from leading
/// whitespace. Newlines inside brackets are ignored.
pub fn tokenize(source: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut indents = vec![0usize];
    let mut depth = 0usize;

    for (idx, raw_line) in source.lines().enumerate() {
        let line = idx + 1;
        let chars: Vec<char> = raw_line.chars().collect();
        let mut col = 0usize;
        let mut width = 0usize;
        if depth == 0 {
            while col < chars.len() && (chars[col] == ' ' || chars[col] == '\t') {
                width += if chars[col] == '\t' { 4 } else { 1 };
                col += 1;
            }
            if col == chars.len() || chars[col] == '#' {
                continue;
            }
            let current = *indents.last().unwrap();
            if width > current {
                indents.push(width);
                out.push(Token {
                    tok: Tok::Indent,
                    line,
                    col: 1,
                });
            } else if width < current {
                while width < *indents.last().unwrap() {
                    indents.pop();
                    out.push(Token {
                        tok: Tok::Dedent,
                        line,
                        col: 1,
                    });
                }
                if width != *indents.last().unwrap() {
                    return Err(lex_err(line, col + 1, "inconsistent dedent"));
                }
            }
        }

        while col < chars.len() {
            let c = chars[col];
            let start = col + 1;
            let push = |out: &mut Vec<Token>, tok: Tok| out.push(Token { tok, line, col: start });
            match c {
                ' ' | '\t' | '\r' => col += 1,
                '#' => break,
                '(' | '[' => {
                    depth += 1;
                    push(&mut out, if c == '(' { Tok::LParen } else { Tok::LBracket });
                    col += 1;
                }
                ')' | ']' => {
                    depth = depth.saturating_sub(1);
                    push(&mut out, if c == ')' { Tok::RParen } else { Tok::RBracket });
                    col += 1;
                }
                ',' => {
                    push(&mut out, Tok::Comma);
                    col += 1;
                }
                '.' => {
                    push(&mut out, Tok::Dot);
                    col += 1;
                }
                ':' => {
                    push(&mut out, Tok::Colon);
                    col += 1;
                }
                '=' => {
                    if chars.get(col + 1) == Some(&'=') {
                        push(&mut out, Tok::EqEq);
                        col += 2;
                    } else {
                        push(&mut out, Tok::Assign);
                        col += 1;
                    }
                }
                '!' => {
                    if chars.get(col + 1) == Some(&'=') {
                        push(&mut out, Tok::NotEq);
                        col += 2;
                    } else {
                        return Err(lex_err(line, start, "unexpected `!`"));
                    }
                }
                '"' | '\'' => {
                    let quote = c;
                    col += 1;
                    let mut s = String::new();
                    loop {
                        match chars.get(col) {
                            None => return Err(lex_err(line, start, "unterminated string literal")),
                            Some(&ch) if ch == quote => {
                                col += 1;
                                break;
                            }
                            Some('\\') => {
                                let esc = chars
                                    .get(col + 1)
                                    .ok_or_else(|| lex_err(line, col + 1, "dangling escape"))?;
                                s.push(match esc {
                                    'n' => '\n',
                                    't' => '\t',
                                    other => *other,
                                });
                                col += 2;
                            }
                            Some(&ch) => {
                                s.push(ch);
                                col += 1;
                            }
                        }
                    }
                    push(&mut out, Tok::Str(s));
                }
                c if c.is_ascii_digit() => {
                    let mut end = col;
                    while end < chars.len() && (chars[end].is_ascii_digit() || chars[end] == '.') {
                        end += 1;
                    }
                    let text: String = chars[col..end].iter().collect();
                    if text.matches('.').count() > 1 || text.ends_with('.') {
                        return Err(lex_err(line, start, format!("malformed number `{text}`")));
                    }
                    push(&mut out, Tok::Number(text));
                    col = end;
                }
                c if c.is_alphabetic() || c == '_' => {
                    let mut end = col;
                    while end < chars.len() && (chars[end].is_alphanumeric() || chars[end] == '_') {
                        end += 1;
                    }
                    let word: String = chars[col..end].iter().collect();
                    let tok = match word.as_str() {
                        "if" => Tok::If,
                        "else" => Tok::Else,
                        "return" => Tok::Return,
                        "and" => Tok::And,
                        "or" => Tok::Or,
                        "not" => Tok::Not,
                        "True" => Tok::True,
                        "False" => Tok::False,
                        _ => Tok::Ident(word),
                    };
                    push(&mut out, tok);
                    col = end;
                }
                other => return Err(lex_err(line, start, format!("unexpected character `{other}`"))),
            }
        }
        if depth == 0 {
            out.push(Token {
                tok: Tok::Newline,
                line,
                col: chars.len() + 1,
            });
        }
    }
    let last_line = source.lines().count().max(1);
    if depth > 0 {
        out.push(Token {
            tok: Tok::Newline,
            line: last_line,
            col: 1,
        });
    }
    while indents.len() > 1 {
        indents.pop();
        out.push(Token {
            tok: Tok::Dedent,
            line: last_line,
            col: 1,
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        line: last_line,
        col: 1,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<Tok> {
        tokenize(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn indentation_tokens() {
        let toks = kinds("if x:\n    return 1\nreturn 2\n");
        assert!(toks.contains(&Tok::Indent));
        assert!(toks.contains(&Tok::Dedent));
    }

    #[test]
    fn strings_with_escapes() {
        let toks = kinds(r#"return "a \"b\" c""#);
        assert_eq!(toks[1], Tok::Str("a \"b\" c".into()));
    }

    #[test]
    fn unterminated_string_is_lexical() {
        let err = tokenize("return \"abc").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Lexical);
        assert_eq!((err.line, err.col), (1, 8));
    }

    #[test]
    fn newline_inside_brackets_is_joined() {
        let toks = kinds("x = [\"a\",\n  \"b\"]\n");
        assert_eq!(toks.iter().filter(|t| **t == Tok::Newline).count(), 1);
        assert!(!toks.contains(&Tok::Indent));
    }
}
