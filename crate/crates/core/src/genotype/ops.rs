use rand::Rng;

use super::{param_count, validate, Genotype, SearchSpaceConfig};
use crate::blocks::{
    Activation, BlockKind, BlockSpec, DropRate, StructuralToken, Token, EXPANSIONS, KERNELS,
};
use crate::tensor::PoolKind;

const CAP_ATTEMPTS: usize = 10_000;

fn pick<T: Copy, R: Rng + ?Sized>(xs: &[T], rng: &mut R) -> T {
    xs[rng.gen_range(0..xs.len())]
}

fn fields_for<R: Rng + ?Sized>(kind: BlockKind, activation: Activation, rng: &mut R) -> BlockSpec {
    BlockSpec {
        kind,
        kernel: kind.has_kernel().then(|| pick(&KERNELS, rng)),
        expansion: kind.has_expansion().then(|| pick(&EXPANSIONS, rng)),
        width: pick(kind.widths(), rng),
        activation,
    }
}

/// One block drawn like the sampler draws it: kind, then fields, uniformly.
pub fn sample_block<R: Rng + ?Sized>(cfg: &SearchSpaceConfig, rng: &mut R) -> BlockSpec {
    let kind = pick(&cfg.kinds, rng);
    let kernel = kind.has_kernel().then(|| pick(&KERNELS, rng));
    let expansion = kind.has_expansion().then(|| pick(&EXPANSIONS, rng));
    let width = pick(kind.widths(), rng);
    let activation = pick(&Activation::ALL, rng);
    BlockSpec {
        kind,
        kernel,
        width,
        expansion,
        activation,
    }
}

fn pool_token<R: Rng + ?Sized>(rng: &mut R) -> Token {
    Token::Structural(StructuralToken::Pool(pick(
        &[PoolKind::Max, PoolKind::Avg],
        rng,
    )))
}

fn drop_token<R: Rng + ?Sized>(rng: &mut R) -> Token {
    Token::Structural(StructuralToken::Dropout(pick(
        &[DropRate::P10, DropRate::P20],
        rng,
    )))
}

fn draw<R: Rng + ?Sized>(cfg: &SearchSpaceConfig, rng: &mut R) -> Genotype {
    let n = rng.gen_range(1..=cfg.max_blocks);
    let mut tokens = Vec::new();
    let mut pools = 0;
    for _ in 0..n {
        tokens.push(Token::Block(sample_block(cfg, rng)));
        if pools < cfg.max_pools && rng.gen_bool(cfg.pool_prob) {
            tokens.push(pool_token(rng));
            pools += 1;
        }
        if rng.gen_bool(cfg.dropout_prob) {
            tokens.push(drop_token(rng));
        }
    }
    Genotype::new(tokens)
}

/// Draws a random valid genotype. With a parameter cap, draws are rejected
/// until one fits; if none fits after many attempts the cheapest
/// single-block genotype is returned.
pub fn sample_random<R: Rng + ?Sized>(cfg: &SearchSpaceConfig, rng: &mut R) -> Genotype {
    if cfg.c_max.is_none() {
        return draw(cfg, rng);
    }
    for _ in 0..CAP_ATTEMPTS {
        let g = draw(cfg, rng);
        if validate(&g, cfg).is_empty() {
            return g;
        }
    }
    cheapest(cfg)
}

fn cheapest(cfg: &SearchSpaceConfig) -> Genotype {
    cfg.kinds
        .iter()
        .map(|&kind| {
            let b = BlockSpec {
                kind,
                kernel: kind.has_kernel().then_some(1),
                expansion: kind.has_expansion().then_some(2),
                width: kind.widths()[0],
                activation: Activation::Relu,
            };
            Genotype::new(vec![Token::Block(b)])
        })
        .min_by_key(|g| param_count(g, cfg))
        .expect("kinds non-empty")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MutationReport {
    /// Tokens of the input selected for an edit.
    pub edits: usize,
}

#[derive(Clone, Copy)]
enum Edit {
    Resample,
    SwapKind,
    Insert,
    Delete,
}

/// Mutation with default bookkeeping discarded.
pub fn mutate<R: Rng + ?Sized>(
    g: &Genotype,
    p_mut: f64,
    cfg: &SearchSpaceConfig,
    rng: &mut R,
) -> Genotype {
    mutate_with_report(g, p_mut, cfg, rng).0
}

/// Each input token is independently selected with probability `p_mut` and
/// receives one uniformly chosen applicable edit. Blocks may have a field
/// resampled, their kind swapped, a sampled block inserted after them, or be
/// deleted; pool and dropout tokens may be resampled or deleted. The result
/// is repaired.
pub fn mutate_with_report<R: Rng + ?Sized>(
    g: &Genotype,
    p_mut: f64,
    cfg: &SearchSpaceConfig,
    rng: &mut R,
) -> (Genotype, MutationReport) {
    let mut report = MutationReport::default();
    let mut out = Vec::with_capacity(g.tokens().len() + 2);
    let mut blocks = g.block_count();
    for &t in g.tokens() {
        if !rng.gen_bool(p_mut) {
            out.push(t);
            continue;
        }
        report.edits += 1;
        match t {
            Token::Block(b) => {
                let mut edits = vec![Edit::Resample, Edit::SwapKind];
                if blocks < cfg.max_blocks {
                    edits.push(Edit::Insert);
                }
                if blocks > 1 {
                    edits.push(Edit::Delete);
                }
                match pick(&edits, rng) {
                    Edit::Resample => out.push(Token::Block(resample_field(b, rng))),
                    Edit::SwapKind => out.push(Token::Block(swap_kind(b, cfg, rng))),
                    Edit::Insert => {
                        out.push(t);
                        out.push(Token::Block(sample_block(cfg, rng)));
                        blocks += 1;
                    }
                    Edit::Delete => blocks -= 1,
                }
            }
            Token::Structural(s) => {
                if rng.gen_bool(0.5) {
                    out.push(match s {
                        StructuralToken::Pool(_) => pool_token(rng),
                        StructuralToken::Dropout(_) => drop_token(rng),
                    });
                }
            }
        }
    }
    (repair(out, cfg), report)
}

fn resample_field<R: Rng + ?Sized>(mut b: BlockSpec, rng: &mut R) -> BlockSpec {
    let mut fields = vec![0u8, 1];
    if b.kind.has_kernel() {
        fields.push(2);
    }
    if b.kind.has_expansion() {
        fields.push(3);
    }
    match pick(&fields, rng) {
        0 => b.width = pick(b.kind.widths(), rng),
        1 => b.activation = pick(&Activation::ALL, rng),
        2 => b.kernel = Some(pick(&KERNELS, rng)),
        _ => b.expansion = Some(pick(&EXPANSIONS, rng)),
    }
    b
}

fn swap_kind<R: Rng + ?Sized>(b: BlockSpec, cfg: &SearchSpaceConfig, rng: &mut R) -> BlockSpec {
    let others: Vec<BlockKind> = cfg.kinds.iter().copied().filter(|&k| k != b.kind).collect();
    if others.is_empty() {
        return resample_field(b, rng);
    }
    fields_for(pick(&others, rng), b.activation, rng)
}

/// Single-point crossover at a shared block index `i` drawn uniformly from
/// `0..=min(blocks(a), blocks(b))`: children are `a[..i] + b[i..]` and
/// `b[..i] + a[i..]`, where `x[..i]` keeps every token before block `i`.
pub fn crossover<R: Rng + ?Sized>(
    a: &Genotype,
    b: &Genotype,
    cfg: &SearchSpaceConfig,
    rng: &mut R,
) -> (Genotype, Genotype) {
    let i = rng.gen_range(0..=a.block_count().min(b.block_count()));
    crossover_at(a, b, i, cfg)
}

/// Crossover at a fixed shared block index.
pub fn crossover_at(
    a: &Genotype,
    b: &Genotype,
    i: usize,
    cfg: &SearchSpaceConfig,
) -> (Genotype, Genotype) {
    let (ca, cb) = (cut(a.tokens(), i), cut(b.tokens(), i));
    let child = |p: &[Token], q: &[Token], pc: usize, qc: usize| {
        let mut t = p[..pc].to_vec();
        t.extend_from_slice(&q[qc..]);
        repair(t, cfg)
    };
    (
        child(a.tokens(), b.tokens(), ca, cb),
        child(b.tokens(), a.tokens(), cb, ca),
    )
}

/// Token index of block `i`, or the length when there are exactly `i` blocks.
fn cut(tokens: &[Token], i: usize) -> usize {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_block())
        .nth(i)
        .map(|(k, _)| k)
        .unwrap_or(tokens.len())
}

/// Deterministic repair: drop leading structural tokens, truncate from the
/// first block beyond the cap, keep only the first pool between two blocks,
/// then drop pools from the tail until the pool cap holds.
pub fn repair(mut tokens: Vec<Token>, cfg: &SearchSpaceConfig) -> Genotype {
    let lead = tokens
        .iter()
        .position(|t| t.is_block())
        .unwrap_or(tokens.len());
    tokens.drain(..lead);
    let end = cut(&tokens, cfg.max_blocks);
    tokens.truncate(end);
    let mut pooled = false;
    tokens.retain(|t| {
        if t.is_block() {
            pooled = false;
        } else if t.is_pool() {
            if pooled {
                return false;
            }
            pooled = true;
        }
        true
    });
    let mut pools = tokens.iter().filter(|t| t.is_pool()).count();
    while pools > cfg.max_pools {
        let last = tokens
            .iter()
            .rposition(|t| t.is_pool())
            .expect("pool present");
        tokens.remove(last);
        pools -= 1;
    }
    Genotype::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::super::{parse, serialize};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SearchSpaceConfig {
        SearchSpaceConfig::default()
    }

    #[test]
    fn sampler_is_seeded_and_valid() {
        let c = cfg();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let g = sample_random(&c, &mut r1);
            assert_eq!(g, sample_random(&c, &mut r2));
            assert!(validate(&g, &c).is_empty(), "{g}");
            assert_eq!(parse(&serialize(&g)).unwrap(), g);
        }
    }

    #[test]
    fn p_mut_zero_is_identity() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = sample_random(&c, &mut rng);
            let (m, rep) = mutate_with_report(&g, 0.0, &c, &mut rng);
            assert_eq!(m, g);
            assert_eq!(rep.edits, 0);
        }
    }

    #[test]
    fn p_mut_one_keeps_cap() {
        let c = cfg();
        let g = parse(&(vec!["B:RN,k3,c8,aR"; 6].join(";") + ";P:max;H")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let m = mutate(&g, 1.0, &c, &mut rng);
            assert!(m.block_count() <= 6);
            assert!(validate(&m, &c).is_empty(), "{m}");
        }
    }

    #[test]
    fn crossover_boundaries() {
        let c = cfg();
        let a = parse("B:CA,k3,c8,aR;P:max;B:RN,k5,c16,aG;H").unwrap();
        let b = parse("B:DN,c4,aG;D:0.1;B:MB,e2,c8,aR;B:CBA,k1,c12,aR;P:avg;H").unwrap();
        let (x, y) = crossover_at(&a, &b, 0, &c);
        assert_eq!((x, y), (b.clone(), a.clone()));
        let (x, y) = crossover_at(&a, &b, 1, &c);
        assert_eq!(
            serialize(&x),
            "B:CA,k3,c8,aR;P:max;B:MB,e2,c8,aR;B:CBA,k1,c12,aR;P:avg;H"
        );
        assert_eq!(serialize(&y), "B:DN,c4,aG;D:0.1;B:RN,k5,c16,aG;H");
        let (x, y) = crossover_at(&a, &b, 2, &c);
        assert_eq!(
            serialize(&x),
            "B:CA,k3,c8,aR;P:max;B:RN,k5,c16,aG;B:CBA,k1,c12,aR;P:avg;H"
        );
        assert_eq!(serialize(&y), "B:DN,c4,aG;D:0.1;B:MB,e2,c8,aR;H");
    }

    #[test]
    fn self_crossover_is_identity() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let g = sample_random(&c, &mut rng);
            for i in 0..=g.block_count() {
                let (x, y) = crossover_at(&g, &g, i, &c);
                assert_eq!(x, g);
                assert_eq!(y, g);
            }
        }
    }

    #[test]
    fn repair_drops_excess_from_tail() {
        let c = cfg();
        let t = parse("B:CA,k3,c8,aR;P:max;B:CA,k3,c8,aR;P:avg;B:CA,k3,c8,aR;P:max;H")
            .unwrap()
            .into_tokens();
        let mut long = vec![Token::Structural(StructuralToken::Dropout(DropRate::P10))];
        long.extend(t.iter().copied());
        long.extend(t.iter().copied());
        let g = repair(long, &c);
        assert_eq!(
            serialize(&g),
            "B:CA,k3,c8,aR;P:max;B:CA,k3,c8,aR;P:avg;B:CA,k3,c8,aR;P:max;\
             B:CA,k3,c8,aR;B:CA,k3,c8,aR;B:CA,k3,c8,aR;H"
        );
    }

    #[test]
    fn repair_unstacks_pools() {
        let g = parse("B:CA,k3,c8,aR;P:max;B:CA,k3,c8,aR;P:avg;D:0.1;H").unwrap();
        let mut t = g.into_tokens();
        t.remove(2);
        assert_eq!(serialize(&repair(t, &cfg())), "B:CA,k3,c8,aR;P:max;D:0.1;H");
    }

    #[test]
    fn cap_rejection_and_fallback() {
        let mut c = cfg();
        c.c_max = Some(400);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let g = sample_random(&c, &mut rng);
            assert!(validate(&g, &c).is_empty());
        }
        c.c_max = Some(1);
        let g = sample_random(&c, &mut rng);
        assert_eq!(g.block_count(), 1);
    }
}
