//! Symbolic arithmetic and recall tasks, their desiderata tuples, a trainer
//! for the toy arithmetic model, and a hand-wired recall model.
//!
//! Arithmetic prompts read `x = d1 d2 ; y = e1 e2 ; x op y =` and the model
//! predicts the first digit of the answer. Recall prompts read
//! `x = d1 d2 ; y = e1 e2 ; x = ?` and the answer is `d1`.

mod planted;
mod train;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::desiderata::{DesiderataTuple, Desideratum, Direction};
use crate::error::{Error, Result};

pub use planted::{build_planted_model, PlantedReport, PlantedSpec, PLANTED_HEAD};
pub use train::{
    heldout_accuracy, load_training_state, problem_split, train_toy_model, train_toy_model_resume,
    CurvePoint, ProblemSplit, TrainConfig, TrainOutcome, TrainReport, TrainState,
};

/// Tokens in id order. Rendered text separates tokens by single spaces.
pub const VOCAB: [&str; 18] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "x", "y", "+", "-", "*", "=", ";", "?",
];
pub const VOCAB_SIZE: usize = VOCAB.len();
pub const TOK_X: usize = 10;
pub const TOK_Y: usize = 11;
pub const TOK_PLUS: usize = 12;
pub const TOK_MINUS: usize = 13;
pub const TOK_TIMES: usize = 14;
pub const TOK_EQ: usize = 15;
pub const TOK_SEP: usize = 16;
pub const TOK_QUERY: usize = 17;

/// Length of an arithmetic prompt.
pub const ARITH_LEN: usize = 14;
/// Length of a recall prompt.
pub const RECALL_LEN: usize = 13;

pub fn token_id(symbol: &str) -> Result<usize> {
    VOCAB
        .iter()
        .position(|&s| s == symbol)
        .ok_or_else(|| Error::Generation(format!("unknown token {symbol:?}")))
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(token_id).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let symbols = ids
        .iter()
        .map(|&i| {
            VOCAB.get(i).copied().ok_or(Error::Index {
                what: "token id",
                index: i,
                bound: VOCAB_SIZE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(symbols.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn token(self) -> usize {
        match self {
            Op::Add => TOK_PLUS,
            Op::Sub => TOK_MINUS,
            Op::Mul => TOK_TIMES,
        }
    }

    pub fn symbol(self) -> &'static str {
        VOCAB[self.token()]
    }

    pub fn apply(self, x: u32, y: u32) -> Option<u32> {
        match self {
            Op::Add => Some(x + y),
            Op::Sub => x.checked_sub(y).filter(|&v| v > 0),
            Op::Mul => Some(x * y),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+" | "add" => Ok(Op::Add),
            "-" | "sub" => Ok(Op::Sub),
            "*" | "x" | "mul" => Ok(Op::Mul),
            _ => Err(Error::Config(format!("unknown operation {s:?}"))),
        }
    }
}

fn first_digit(mut v: u32) -> usize {
    while v >= 10 {
        v /= 10;
    }
    v as usize
}

fn digits(v: u32) -> [usize; 2] {
    [(v / 10) as usize, (v % 10) as usize]
}

fn check_operand(v: u32) -> Result<()> {
    if (10..=99).contains(&v) {
        Ok(())
    } else {
        Err(Error::Generation(format!("operand {v} is not a two-digit number")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArithmeticProblem {
    pub x: u32,
    pub y: u32,
    pub op: Op,
}

impl ArithmeticProblem {
    pub fn new(x: u32, y: u32, op: Op) -> Result<Self> {
        check_operand(x)?;
        check_operand(y)?;
        if op.apply(x, y).is_none() {
            return Err(Error::Generation(format!("{x} {op} {y} has no positive answer")));
        }
        Ok(Self { x, y, op })
    }

    pub fn answer(&self) -> u32 {
        self.op.apply(self.x, self.y).expect("validated at construction")
    }

    /// Token id of the answer's leading digit.
    pub fn answer_token(&self) -> usize {
        first_digit(self.answer())
    }

    pub fn tokens(&self) -> Vec<usize> {
        let [d1, d2] = digits(self.x);
        let [e1, e2] = digits(self.y);
        vec![
            TOK_X,
            TOK_EQ,
            d1,
            d2,
            TOK_SEP,
            TOK_Y,
            TOK_EQ,
            e1,
            e2,
            TOK_SEP,
            TOK_X,
            self.op.token(),
            TOK_Y,
            TOK_EQ,
        ]
    }

    pub fn render(&self) -> String {
        detokenize(&self.tokens()).expect("rendered tokens are in the vocabulary")
    }

    pub fn parse(ids: &[usize]) -> Result<Self> {
        let bad = || Error::Generation(format!("not an arithmetic prompt: {ids:?}"));
        if ids.len() != ARITH_LEN {
            return Err(bad());
        }
        let fixed = [
            (0, TOK_X),
            (1, TOK_EQ),
            (4, TOK_SEP),
            (5, TOK_Y),
            (6, TOK_EQ),
            (9, TOK_SEP),
            (10, TOK_X),
            (12, TOK_Y),
            (13, TOK_EQ),
        ];
        if fixed.iter().any(|&(i, t)| ids[i] != t) || [2, 3, 7, 8].iter().any(|&i| ids[i] > 9) {
            return Err(bad());
        }
        let op = match ids[11] {
            TOK_PLUS => Op::Add,
            TOK_MINUS => Op::Sub,
            TOK_TIMES => Op::Mul,
            _ => return Err(bad()),
        };
        let x = (ids[2] * 10 + ids[3]) as u32;
        let y = (ids[7] * 10 + ids[8]) as u32;
        Self::new(x, y, op)
    }
}

/// Every valid problem for `op`, in `(x, y)` order.
pub fn all_problems(op: Op) -> Vec<ArithmeticProblem> {
    (10..=99)
        .flat_map(|x| (10..=99).map(move |y| (x, y)))
        .filter_map(|(x, y)| ArithmeticProblem::new(x, y, op).ok())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecallProblem {
    pub x: u32,
    pub y: u32,
}

impl RecallProblem {
    pub fn new(x: u32, y: u32) -> Result<Self> {
        check_operand(x)?;
        check_operand(y)?;
        Ok(Self { x, y })
    }

    pub fn answer_token(&self) -> usize {
        digits(self.x)[0]
    }

    pub fn tokens(&self) -> Vec<usize> {
        let [d1, d2] = digits(self.x);
        let [e1, e2] = digits(self.y);
        vec![
            TOK_X, TOK_EQ, d1, d2, TOK_SEP, TOK_Y, TOK_EQ, e1, e2, TOK_SEP, TOK_X, TOK_EQ,
            TOK_QUERY,
        ]
    }

    pub fn render(&self) -> String {
        detokenize(&self.tokens()).expect("rendered tokens are in the vocabulary")
    }
}

// ---- labeled tuples -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleKind {
    Vd,
    Oi,
    Recall,
}

impl TupleKind {
    pub fn direction(self) -> Direction {
        match self {
            TupleKind::Vd | TupleKind::Recall => Direction::ChangeToAlternate,
            TupleKind::Oi => Direction::PreserveOriginal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleMeta {
    pub x: u32,
    pub y: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<Op>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_op: Option<Op>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_x: Option<u32>,
}

/// A desiderata tuple with its provenance; one line of a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTuple {
    pub kind: TupleKind,
    pub orig_ids: Vec<usize>,
    pub alt_ids: Vec<usize>,
    pub target_id: usize,
    pub competing_id: usize,
    pub meta: TupleMeta,
}

impl LabeledTuple {
    pub fn tuple(&self) -> DesiderataTuple {
        DesiderataTuple {
            orig: self.orig_ids.clone(),
            alt: self.alt_ids.clone(),
            target: self.target_id,
            competing: self.competing_id,
        }
    }
}

pub fn to_desideratum(name: &str, kind: TupleKind, tuples: &[LabeledTuple]) -> Desideratum {
    Desideratum::new(name, kind.direction(), tuples.iter().map(|t| t.tuple()).collect())
}

pub fn plain_tuples(tuples: &[LabeledTuple]) -> Vec<DesiderataTuple> {
    tuples.iter().map(|t| t.tuple()).collect()
}

/// Draws before giving up on a single tuple.
const MAX_ATTEMPTS: usize = 100_000;

/// Targets `1..=9` repeated to `count`, shuffled.
fn balanced_targets(count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if count < 9 {
        return Err(Error::Generation(format!(
            "{count} tuples cannot cover the nine target digits"
        )));
    }
    let mut ts: Vec<usize> = (0..count).map(|i| 1 + i % 9).collect();
    ts.shuffle(rng);
    Ok(ts)
}

fn generate<F>(count: usize, seed: u64, mut draw: F) -> Result<Vec<LabeledTuple>>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Option<LabeledTuple>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = balanced_targets(count, &mut rng)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    for t in targets {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            if let Some(c) = draw(&mut rng, t) {
                if seen.insert((c.orig_ids.clone(), c.alt_ids.clone())) {
                    found = Some(c);
                    break;
                }
            }
        }
        out.push(found.ok_or_else(|| {
            Error::Generation(format!(
                "no new tuple with target {t} after {MAX_ATTEMPTS} draws"
            ))
        })?);
    }
    Ok(out)
}

fn draw_problem(rng: &mut ChaCha8Rng, op: Op, x: Option<u32>, y: Option<u32>) -> Option<ArithmeticProblem> {
    let x = x.unwrap_or_else(|| rng.gen_range(10..=99));
    let y = y.unwrap_or_else(|| rng.gen_range(10..=99));
    ArithmeticProblem::new(x, y, op).ok()
}

/// Value-dependence tuples: the alternate changes only `x`, and the target is
/// the alternate's answer digit.
pub fn gen_vd_tuples(count: usize, ops: &[Op], seed: u64) -> Result<Vec<LabeledTuple>> {
    if ops.is_empty() {
        return Err(Error::Generation("no operations to draw from".into()));
    }
    generate(count, seed, |rng, t| {
        let op = *ops.choose(rng)?;
        let alt = draw_problem(rng, op, None, None)?;
        if alt.answer_token() != t {
            return None;
        }
        let orig = draw_problem(rng, op, None, Some(alt.y))?;
        if orig.x == alt.x || orig.answer_token() == t {
            return None;
        }
        Some(LabeledTuple {
            kind: TupleKind::Vd,
            orig_ids: orig.tokens(),
            alt_ids: alt.tokens(),
            target_id: t,
            competing_id: orig.answer_token(),
            meta: TupleMeta {
                x: orig.x,
                y: orig.y,
                op: Some(op),
                alt_op: None,
                alt_x: Some(alt.x),
            },
        })
    })
}

/// Operation-invariance tuples: the alternate flips the operation within a
/// pair, and the target is the original's answer digit. Each pair is used in
/// both orientations.
pub fn gen_oi_tuples(count: usize, op_pairs: &[(Op, Op)], seed: u64) -> Result<Vec<LabeledTuple>> {
    if op_pairs.is_empty() || op_pairs.iter().any(|(a, b)| a == b) {
        return Err(Error::Generation(
            "operation pairs must be non-empty and flip the operation".into(),
        ));
    }
    generate(count, seed, |rng, t| {
        let &(a, b) = op_pairs.choose(rng)?;
        let (op, alt_op) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        let orig = draw_problem(rng, op, None, None)?;
        if orig.answer_token() != t {
            return None;
        }
        let alt = ArithmeticProblem::new(orig.x, orig.y, alt_op).ok()?;
        if alt.answer_token() == t {
            return None;
        }
        Some(LabeledTuple {
            kind: TupleKind::Oi,
            orig_ids: orig.tokens(),
            alt_ids: alt.tokens(),
            target_id: t,
            competing_id: alt.answer_token(),
            meta: TupleMeta {
                x: orig.x,
                y: orig.y,
                op: Some(op),
                alt_op: Some(alt_op),
                alt_x: None,
            },
        })
    })
}

/// Recall tuples: the alternate changes only the leading digit of `x`.
pub fn gen_recall_tuples(count: usize, seed: u64) -> Result<Vec<LabeledTuple>> {
    generate(count, seed, |rng, t| {
        let d2: u32 = rng.gen_range(0..=9);
        let d1: u32 = rng.gen_range(1..=9);
        if d1 as usize == t {
            return None;
        }
        let y = rng.gen_range(10..=99);
        let orig = RecallProblem::new(d1 * 10 + d2, y).ok()?;
        let alt = RecallProblem::new(t as u32 * 10 + d2, y).ok()?;
        Some(LabeledTuple {
            kind: TupleKind::Recall,
            orig_ids: orig.tokens(),
            alt_ids: alt.tokens(),
            target_id: t,
            competing_id: orig.answer_token(),
            meta: TupleMeta {
                x: orig.x,
                y,
                op: None,
                alt_op: None,
                alt_x: Some(alt.x),
            },
        })
    })
}

/// Splits generated tuples into a train and a test half with targets
/// balanced across both.
pub fn split_balanced(tuples: Vec<LabeledTuple>, train: usize) -> Result<(Vec<LabeledTuple>, Vec<LabeledTuple>)> {
    if train > tuples.len() {
        return Err(Error::Generation(format!(
            "cannot take {train} training tuples from {}",
            tuples.len()
        )));
    }
    let mut by_target: Vec<Vec<LabeledTuple>> = vec![Vec::new(); VOCAB_SIZE];
    for t in tuples {
        by_target[t.target_id].push(t);
    }
    let mut interleaved = Vec::new();
    let longest = by_target.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for group in &by_target {
            if let Some(t) = group.get(i) {
                interleaved.push(t.clone());
            }
        }
    }
    let test = interleaved.split_off(train);
    Ok((interleaved, test))
}

// ---- dataset files -------------------------------------------------------------------

pub fn write_jsonl(tuples: &[LabeledTuple], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for t in tuples {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<LabeledTuple>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: LabeledTuple = serde_json::from_str(&line)?;
        t.tuple().validate()?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_small_and_bijective() {
        assert!(VOCAB_SIZE < 32);
        for (i, s) in VOCAB.iter().enumerate() {
            assert_eq!(token_id(s).unwrap(), i);
        }
        assert!(token_id("z").is_err());
    }

    #[test]
    fn arithmetic_rendering() {
        let p = ArithmeticProblem::new(36, 21, Op::Add).unwrap();
        assert_eq!(p.render(), "x = 3 6 ; y = 2 1 ; x + y =");
        assert_eq!(p.answer(), 57);
        assert_eq!(p.answer_token(), 5);
        assert_eq!(ArithmeticProblem::parse(&p.tokens()).unwrap(), p);
        assert!(ArithmeticProblem::new(21, 36, Op::Sub).is_err());
        assert!(ArithmeticProblem::new(21, 21, Op::Sub).is_err());
        assert_eq!(ArithmeticProblem::new(12, 13, Op::Mul).unwrap().answer(), 156);
    }

    #[test]
    fn recall_rendering() {
        let p = RecallProblem::new(37, 52).unwrap();
        assert_eq!(p.render(), "x = 3 7 ; y = 5 2 ; x = ?");
        assert_eq!(p.answer_token(), 3);
        assert_eq!(p.tokens().len(), RECALL_LEN);
    }

    #[test]
    fn problem_counts() {
        assert_eq!(all_problems(Op::Add).len(), 8100);
        assert_eq!(all_problems(Op::Sub).len(), 90 * 89 / 2);
        assert_eq!(all_problems(Op::Mul).len(), 8100);
    }

    #[test]
    fn too_few_tuples_is_generation_error() {
        assert!(matches!(gen_vd_tuples(5, &[Op::Add], 0), Err(Error::Generation(_))));
    }
}
