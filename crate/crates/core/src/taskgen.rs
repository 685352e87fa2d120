//! Seeded synthetic task tiers, reference solvers and corpus mixing.
//!
//! | tier | hint | task |
//! |------|------|------|
//! | 0 | SPE | fixed knowledge-base lookup `R of K ?` |
//! | 1 | CRE | transitive ordering, `if ( A > B and B > C ) ? smallest` |
//! | 2 | LIE | nested modular arithmetic, `( ( ( a + b ) then - c ) then + d ) =` |
//! | 3 | MIE | entity tracking across windows, query in the last window |
//! | 4 | MCE | `meta M so ( inner )` around a tier-2 or tier-3 task |
//!
//! Every answer is one of [`NUM_CLASSES`] classes: value index for tiers 0
//! and 3, entity index for tier 1, residue for tier 2.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertKind;
use crate::vocab::Vocab;

pub const NUM_CLASSES: usize = 12;
pub const NUM_TIERS: usize = 5;
pub const MODULUS: usize = 7;
pub const CORPUS_VERSION: u32 = 1;

const RELATIONS: usize = 2;
const KEYS: usize = 16;
const ENTITIES: usize = 12;
const VALUES: usize = 12;
const METAS: usize = 4;
const FILLERS: [&str; 4] = ["fill", "the", "a", "was"];
const KB_SEED: u64 = 0x6b62_7461_626c_6530;

/// Family each tier is hinted to.
pub fn tier_hint(tier: u8) -> Result<ExpertKind> {
    ExpertKind::ALL
        .get(tier as usize)
        .copied()
        .ok_or_else(|| Error::config(format!("tier {tier} outside 0..{NUM_TIERS}")))
}

/// The fixed knowledge base behind tier 0: `kb()[relation][key]` is a value index.
pub fn kb() -> &'static [[usize; KEYS]; RELATIONS] {
    static KB: std::sync::OnceLock<[[usize; KEYS]; RELATIONS]> = std::sync::OnceLock::new();
    KB.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(KB_SEED);
        let mut t = [[0; KEYS]; RELATIONS];
        for row in &mut t {
            for v in row.iter_mut() {
                *v = rng.gen_range(0..VALUES);
            }
        }
        t
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    /// Leading filler tokens for tier 0, drawn from `0..=max_fillers`.
    pub max_fillers: usize,
    /// Inclusive range of relations per tier-1 sample.
    pub relations: (usize, usize),
    /// Inclusive range of fact windows per tier-3 sample.
    pub facts: (usize, usize),
    /// Window length; must match the model's attention window.
    pub window: usize,
    /// Probability that a tier-4 sample wraps a tier-3 task instead of tier 2.
    pub long_inner: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { max_fillers: 3, relations: (2, 3), facts: (3, 4), window: 24, long_inner: 0.5 }
    }
}

impl GenParams {
    fn validate(&self) -> Result<()> {
        let (r0, r1) = self.relations;
        let (f0, f1) = self.facts;
        if r0 < 1 || r0 > r1 || r1 + 1 > ENTITIES {
            return Err(Error::config(format!("relations range {:?}", self.relations)));
        }
        if f0 < 1 || f0 > f1 || f1 > ENTITIES.min(VALUES) {
            return Err(Error::config(format!("facts range {:?}", self.facts)));
        }
        // The smallest window must fit a fact (7 tokens) behind the tier-4 prefix (4 tokens),
        // and the closing query (6 tokens).
        if self.window < 11 {
            return Err(Error::config(format!("window {} too short", self.window)));
        }
        if !(0.0..=1.0).contains(&self.long_inner) {
            return Err(Error::config(format!("long_inner {} not a probability", self.long_inner)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub tier: u8,
    pub hint: ExpertKind,
    pub params: GenParams,
    pub seed: u64,
}

impl TierSpec {
    pub fn new(tier: u8, seed: u64) -> Result<Self> {
        Ok(Self { tier, hint: tier_hint(tier)?, params: GenParams::default(), seed })
    }

    pub fn with_params(mut self, params: GenParams) -> Self {
        self.params = params;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub tier: u8,
    /// Tier of the wrapped task for tier-4 samples.
    pub inner_tier: Option<u8>,
    pub hint: ExpertKind,
    pub tokens: Vec<usize>,
    pub answer: usize,
    pub seed: u64,
}

impl SampleRecord {
    /// Tier used for depth-control targets: the inner tier for wrapped samples.
    pub fn effective_tier(&self) -> u8 {
        self.inner_tier.unwrap_or(self.tier)
    }
}

struct Builder<'v> {
    vocab: &'v Vocab,
    out: Vec<usize>,
}

impl Builder<'_> {
    fn push(&mut self, tok: &str) {
        self.out.push(self.vocab.id(tok).expect("generator emits vocabulary tokens"));
    }

    fn words(&mut self, text: &str) {
        for w in text.split_whitespace() {
            self.push(w);
        }
    }

    fn fillers(&mut self, rng: &mut ChaCha8Rng, n: usize) {
        for _ in 0..n {
            self.push(FILLERS[rng.gen_range(0..FILLERS.len())]);
        }
    }
}

fn gen_tier0(b: &mut Builder, rng: &mut ChaCha8Rng, p: &GenParams) -> usize {
    let nf = rng.gen_range(0..=p.max_fillers);
    b.fillers(rng, nf);
    let rel = rng.gen_range(0..RELATIONS);
    let key = rng.gen_range(0..KEYS);
    b.words(&format!("R{rel} of K{key} ?"));
    kb()[rel][key]
}

fn gen_tier1(b: &mut Builder, rng: &mut ChaCha8Rng, p: &GenParams) -> usize {
    let nrel = rng.gen_range(p.relations.0..=p.relations.1);
    let mut ents: Vec<usize> = (0..ENTITIES).collect();
    ents.shuffle(rng);
    let chain = &ents[..nrel + 1];
    let mut order: Vec<usize> = (0..nrel).collect();
    order.shuffle(rng);
    b.words("if (");
    for (i, &r) in order.iter().enumerate() {
        if i > 0 {
            b.push("and");
        }
        b.words(&format!("E{} > E{}", chain[r], chain[r + 1]));
    }
    let smallest = rng.gen_bool(0.5);
    b.words(if smallest { ") ? smallest" } else { ") ? largest" });
    if smallest {
        chain[nrel]
    } else {
        chain[0]
    }
}

fn gen_tier2(b: &mut Builder, rng: &mut ChaCha8Rng) -> usize {
    let mut digits: Vec<usize> = (0..MODULUS).collect();
    digits.shuffle(rng);
    let [a, bb, c, d] = [digits[0], digits[1], digits[2], digits[3]];
    b.words(&format!("( ( ( D{a} + D{bb} ) then - D{c} ) then + D{d} ) ="));
    (a + bb + MODULUS - c + d) % MODULUS
}

/// Fact windows then a query window. `offset` tokens already precede the
/// first window; `suffix` tokens will follow the query.
fn gen_tier3(b: &mut Builder, rng: &mut ChaCha8Rng, p: &GenParams, offset: usize, suffix: usize) -> usize {
    let nf = rng.gen_range(p.facts.0..=p.facts.1);
    let mut ents: Vec<usize> = (0..ENTITIES).collect();
    let mut vals: Vec<usize> = (0..VALUES).collect();
    ents.shuffle(rng);
    vals.shuffle(rng);
    for i in 0..nf {
        let room = p.window - 7 - if i == 0 { offset } else { 0 };
        let pre = rng.gen_range(0..=room);
        b.fillers(rng, pre);
        b.words(&format!("( E{} is at V{} ) then", ents[i], vals[i]));
        b.fillers(rng, room - pre);
    }
    let q = rng.gen_range(0..nf);
    b.fillers(rng, p.window - 5 - suffix);
    b.words(&format!("so where is E{} ?", ents[q]));
    vals[q]
}

fn gen_one(tier: u8, p: &GenParams, seed: u64) -> (Vec<usize>, usize, Option<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { vocab: Vocab::standard(), out: Vec::new() };
    let mut inner = None;
    let answer = match tier {
        0 => gen_tier0(&mut b, &mut rng, p),
        1 => gen_tier1(&mut b, &mut rng, p),
        2 => gen_tier2(&mut b, &mut rng),
        3 => gen_tier3(&mut b, &mut rng, p, 0, 0),
        _ => {
            let m = rng.gen_range(0..METAS);
            b.words(&format!("meta M{m} so ("));
            let ans = if rng.gen_bool(p.long_inner) {
                inner = Some(3);
                gen_tier3(&mut b, &mut rng, p, 4, 1)
            } else {
                inner = Some(2);
                gen_tier2(&mut b, &mut rng)
            };
            b.push(")");
            ans
        }
    };
    (b.out, answer, inner)
}

/// `count` samples from one tier. Each sample carries its own seed, drawn
/// from the spec seed, and can be regenerated from it alone.
pub fn generate(spec: &TierSpec, count: usize) -> Result<Vec<SampleRecord>> {
    if count == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    if spec.hint != tier_hint(spec.tier)? {
        return Err(Error::config(format!("tier {} cannot carry hint {}", spec.tier, spec.hint)));
    }
    spec.params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..count)
        .map(|i| {
            let seed = rng.next_u64();
            let (tokens, answer, inner_tier) = gen_one(spec.tier, &spec.params, seed);
            SampleRecord { id: i as u64, tier: spec.tier, inner_tier, hint: spec.hint, tokens, answer, seed }
        })
        .collect())
}

/// Largest-remainder apportionment of `total` over `ratios`.
pub fn mix_counts(ratios: &[f64], total: usize) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::config(format!("invalid ratios {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("ratios sum to {sum}, expected 1")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite")
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Tier groups of the four-way mix: simple, compositional, complex, and a
/// shared bucket for the two long-horizon tiers.
pub const MIX_BUCKETS: [&[u8]; 4] = [&[0], &[1], &[2], &[3, 4]];
pub const DEFAULT_RATIOS: [f64; 4] = [0.40, 0.35, 0.20, 0.05];

/// Mix the five tier generators. `specs[t]` is the spec for tier `t`;
/// `tier4_share` splits the last bucket between tiers 3 and 4.
pub fn mix_corpus(
    specs: &[TierSpec],
    ratios: &[f64],
    total: usize,
    tier4_share: f64,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if specs.len() != NUM_TIERS || specs.iter().enumerate().any(|(t, s)| s.tier as usize != t) {
        return Err(Error::config("mix_corpus needs one spec per tier, in tier order"));
    }
    if ratios.len() != MIX_BUCKETS.len() {
        return Err(Error::config(format!("expected {} ratios", MIX_BUCKETS.len())));
    }
    let buckets = mix_counts(ratios, total)?;
    let split = mix_counts(&[1.0 - tier4_share, tier4_share], buckets[3])?;
    let per_tier = [buckets[0], buckets[1], buckets[2], split[0], split[1]];
    let mut out = Vec::with_capacity(total);
    for (spec, &n) in specs.iter().zip(&per_tier) {
        if n > 0 {
            out.extend(generate(spec, n)?);
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (i, s) in out.iter_mut().enumerate() {
        s.id = i as u64;
    }
    Ok(out)
}

/// Default per-tier specs derived from one corpus seed.
pub fn default_specs(seed: u64) -> Vec<TierSpec> {
    (0..NUM_TIERS as u8)
        .map(|t| TierSpec::new(t, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64 + 1)).expect("valid tier"))
        .collect()
}

// ---------------------------------------------------------------------------
// Reference solvers. They read only the token sequence.

struct Cursor<'a> {
    toks: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.peek().ok_or_else(|| Error::Data("unexpected end of expression".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn skip_then(&mut self) {
        while self.peek() == Some("then") {
            self.pos += 1;
        }
    }

    fn term(&mut self) -> Result<i64> {
        self.skip_then();
        match self.next()? {
            "(" => {
                let v = self.expr()?;
                self.skip_then();
                match self.next()? {
                    ")" => Ok(v),
                    t => Err(Error::Data(format!("expected ')', found {t:?}"))),
                }
            }
            t => index_of(t, 'D'),
        }
    }

    fn expr(&mut self) -> Result<i64> {
        let mut v = self.term()?;
        loop {
            self.skip_then();
            match self.peek() {
                Some("+") => {
                    self.pos += 1;
                    v += self.term()?;
                }
                Some("-") => {
                    self.pos += 1;
                    v -= self.term()?;
                }
                _ => return Ok(v),
            }
        }
    }
}

fn index_of(tok: &str, prefix: char) -> Result<i64> {
    tok.strip_prefix(prefix)
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::Data(format!("expected {prefix}<n>, found {tok:?}")))
}

fn solve_words(w: &[&str]) -> Result<usize> {
    let is_filler = |t: &&str| FILLERS.contains(t);
    let body: Vec<&str> = w.iter().copied().filter(|t| !is_filler(t)).collect();
    match body.first().copied() {
        Some("meta") => {
            if body.len() < 5 || body[2] != "so" || body[3] != "(" || body.last() != Some(&")") {
                return Err(Error::Data("malformed meta wrapper".into()));
            }
            solve_words(&body[4..body.len() - 1])
        }
        Some("if") => {
            let mut lhs = Vec::new();
            let mut rhs = Vec::new();
            for win in body.windows(3) {
                if win[1] == ">" {
                    lhs.push(win[0]);
                    rhs.push(win[2]);
                }
            }
            let smallest = match body.last() {
                Some(&"smallest") => true,
                Some(&"largest") => false,
                _ => return Err(Error::Data("ordering query missing".into())),
            };
            let pick = if smallest {
                rhs.iter().find(|e| !lhs.contains(e))
            } else {
                lhs.iter().find(|e| !rhs.contains(e))
            };
            let e = pick.ok_or_else(|| Error::Data("ordering has no extreme".into()))?;
            Ok(index_of(e, 'E')? as usize)
        }
        _ if body.contains(&"=") => {
            let end = body.iter().position(|&t| t == "=").expect("present");
            let mut c = Cursor { toks: body[..end].to_vec(), pos: 0 };
            let v = c.expr()?;
            if c.pos != end {
                return Err(Error::Data("trailing tokens in expression".into()));
            }
            Ok(v.rem_euclid(MODULUS as i64) as usize)
        }
        _ if body.contains(&"where") => {
            let mut loc = std::collections::HashMap::new();
            let mut query = None;
            for (i, win) in body.windows(4).enumerate() {
                if win[1] == "is" && win[2] == "at" {
                    loc.insert(win[0], win[3]);
                }
                if win[0] == "where" && win[1] == "is" {
                    query = Some(body[i + 2]);
                }
            }
            let q = query.ok_or_else(|| Error::Data("tracking query missing".into()))?;
            let v = loc.get(q).ok_or_else(|| Error::Data(format!("no location for {q}")))?;
            Ok(index_of(v, 'V')? as usize)
        }
        _ => {
            let at = body.iter().position(|&t| t == "of").ok_or_else(|| Error::Data("unrecognized task".into()))?;
            if at == 0 || at + 1 >= body.len() {
                return Err(Error::Data("malformed lookup".into()));
            }
            let r = index_of(body[at - 1], 'R')? as usize;
            let k = index_of(body[at + 1], 'K')? as usize;
            kb().get(r)
                .and_then(|row| row.get(k))
                .copied()
                .ok_or_else(|| Error::Data(format!("lookup R{r} of K{k} outside knowledge base")))
        }
    }
}

/// Answer any generated sample from its tokens alone.
pub fn solve(tokens: &[usize]) -> Result<usize> {
    let v = Vocab::standard();
    let words: Vec<&str> = tokens.iter().map(|&t| v.token(t)).collect();
    solve_words(&words)
}

// ---------------------------------------------------------------------------
// JSONL corpus files.

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    version: u32,
    id: u64,
    tier: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inner_tier: Option<u8>,
    hint: ExpertKind,
    text: String,
    answer: usize,
    seed: u64,
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[SampleRecord]) -> Result<()> {
    let v = Vocab::standard();
    for s in samples {
        let line = CorpusLine {
            version: CORPUS_VERSION,
            id: s.id,
            tier: s.tier,
            inner_tier: s.inner_tier,
            hint: s.hint,
            text: v.decode(&s.tokens),
            answer: s.answer,
            seed: s.seed,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<SampleRecord>> {
    let v = Vocab::standard();
    let mut out = Vec::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CorpusLine = serde_json::from_str(&line)?;
        if c.version != CORPUS_VERSION {
            return Err(Error::Data(format!("line {}: corpus version {} unsupported", no + 1, c.version)));
        }
        if c.answer >= NUM_CLASSES {
            return Err(Error::Label(format!("line {}: answer {} out of range", no + 1, c.answer)));
        }
        out.push(SampleRecord {
            id: c.id,
            tier: c.tier,
            inner_tier: c.inner_tier,
            hint: c.hint,
            tokens: v.encode(&c.text)?.tokens,
            answer: c.answer,
            seed: c.seed,
        });
    }
    Ok(out)
}
