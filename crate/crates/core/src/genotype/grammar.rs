use super::{validate, Genotype, GenotypeError, SearchSpaceConfig};
use crate::blocks::{
    Activation, BlockKind, BlockSpec, DropRate, StructuralToken, Token, EXPANSIONS, KERNELS,
};
use crate::tensor::PoolKind;

pub(crate) fn pool_code(k: PoolKind) -> &'static str {
    match k {
        PoolKind::Max => "max",
        PoolKind::Avg => "avg",
    }
}

fn block_string(b: &BlockSpec) -> String {
    let mut s = format!("B:{}", b.kind.code());
    if let Some(k) = b.kernel {
        s.push_str(&format!(",k{k}"));
    }
    if let Some(e) = b.expansion {
        s.push_str(&format!(",e{e}"));
    }
    s.push_str(&format!(",c{},a{}", b.width, b.activation.code()));
    s
}

/// Canonical string form.
pub fn serialize(g: &Genotype) -> String {
    let mut parts: Vec<String> = g
        .tokens()
        .iter()
        .map(|t| match t {
            Token::Block(b) => block_string(b),
            Token::Structural(StructuralToken::Pool(k)) => format!("P:{}", pool_code(*k)),
            Token::Structural(StructuralToken::Dropout(r)) => format!("D:{}", r.code()),
        })
        .collect();
    parts.push("H".into());
    parts.join(";")
}

fn syntax(pos: usize, message: impl Into<String>) -> GenotypeError {
    GenotypeError::Syntax {
        pos,
        message: message.into(),
    }
}

/// Parses and validates against the default search space. Syntax and range
/// problems yield [`GenotypeError::Syntax`] with a byte offset; structural
/// limits (block and pool counts) yield [`GenotypeError::Invalid`].
pub fn parse(code: &str) -> Result<Genotype, GenotypeError> {
    parse_with(code, &SearchSpaceConfig::default())
}

pub(crate) fn parse_with(code: &str, cfg: &SearchSpaceConfig) -> Result<Genotype, GenotypeError> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    let mut pieces = code.split(';').peekable();
    let mut saw_head = false;
    while let Some(piece) = pieces.next() {
        if saw_head {
            return Err(syntax(pos - 1, "unexpected text after head `H`"));
        }
        if piece == "H" {
            if tokens.is_empty() {
                return Err(syntax(pos, "genotype must start with a block"));
            }
            saw_head = true;
        } else if let Some(rest) = piece.strip_prefix("B:") {
            tokens.push(Token::Block(parse_block(rest, pos + 2)?));
        } else if tokens.is_empty() {
            return Err(syntax(pos, "genotype must start with a block `B:`"));
        } else if let Some(rest) = piece.strip_prefix("P:") {
            let k = match rest {
                "max" => PoolKind::Max,
                "avg" => PoolKind::Avg,
                _ => return Err(syntax(pos + 2, format!("unknown pool `{rest}` (max|avg)"))),
            };
            tokens.push(Token::Structural(StructuralToken::Pool(k)));
        } else if let Some(rest) = piece.strip_prefix("D:") {
            let r = match rest {
                "0.1" => DropRate::P10,
                "0.2" => DropRate::P20,
                _ => {
                    return Err(syntax(
                        pos + 2,
                        format!("unknown dropout rate `{rest}` (0.1|0.2)"),
                    ))
                }
            };
            tokens.push(Token::Structural(StructuralToken::Dropout(r)));
        } else if pieces.peek().is_none() {
            return Err(syntax(pos, "expected terminal head `H`"));
        } else {
            return Err(syntax(pos, format!("unknown token `{piece}`")));
        }
        pos += piece.len() + 1;
    }
    if !saw_head {
        return Err(syntax(code.len(), "missing terminal `;H`"));
    }
    let g = Genotype::new(tokens);
    let v = validate(&g, cfg);
    if v.is_empty() {
        Ok(g)
    } else {
        Err(GenotypeError::Invalid(v))
    }
}

fn parse_block(s: &str, base: usize) -> Result<BlockSpec, GenotypeError> {
    let fields: Vec<&str> = s.split(',').collect();
    let code = fields[0];
    let kind = BlockKind::from_code(code)
        .ok_or_else(|| syntax(base, format!("unknown block kind `{code}`")))?;
    let mut pos = base + code.len() + 1;
    let mut next = 1;
    let mut expect = |tag: char| -> Result<(&str, usize), GenotypeError> {
        let f = *fields
            .get(next)
            .ok_or_else(|| syntax(pos - 1, format!("{kind}: missing `,{tag}` field")))?;
        let at = pos;
        pos += f.len() + 1;
        next += 1;
        match f.strip_prefix(tag) {
            Some(v) if !v.is_empty() => Ok((v, at)),
            _ => Err(syntax(
                at,
                format!("{kind}: expected `{tag}` field, found `{f}`"),
            )),
        }
    };
    let num = |v: &str, at: usize| -> Result<u16, GenotypeError> {
        if v.len() > 1 && v.starts_with('0') || !v.bytes().all(|b| b.is_ascii_digit()) {
            return Err(syntax(at, format!("`{v}` is not a canonical integer")));
        }
        v.parse()
            .map_err(|_| syntax(at, format!("`{v}` is not an integer")))
    };
    let kernel = if kind.has_kernel() {
        let (v, at) = expect('k')?;
        let k = num(v, at)?;
        if !KERNELS.iter().any(|&x| x as u16 == k) {
            return Err(syntax(at, format!("{kind}: kernel {k} not in {{1,3,5}}")));
        }
        Some(k as u8)
    } else {
        None
    };
    let expansion = if kind.has_expansion() {
        let (v, at) = expect('e')?;
        let e = num(v, at)?;
        if !EXPANSIONS.iter().any(|&x| x as u16 == e) {
            return Err(syntax(
                at,
                format!("{kind}: expansion {e} not in {{2,3,4}}"),
            ));
        }
        Some(e as u8)
    } else {
        None
    };
    let (v, at) = expect('c')?;
    let width = num(v, at)?;
    if !kind.widths().contains(&width) {
        return Err(syntax(
            at,
            format!("{kind}: width {width} not in {:?}", kind.widths()),
        ));
    }
    let (v, at) = expect('a')?;
    let activation = match v {
        "R" => Activation::Relu,
        "G" => Activation::Gelu,
        _ => return Err(syntax(at, format!("activation `{v}` not in {{R,G}}"))),
    };
    if let Some(extra) = fields.get(next) {
        return Err(syntax(pos, format!("{kind}: unexpected field `{extra}`")));
    }
    Ok(BlockSpec {
        kind,
        kernel,
        width,
        expansion,
        activation,
    })
}
