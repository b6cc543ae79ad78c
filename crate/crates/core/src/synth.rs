//! Generator for synthetic reentrancy-style corpora.
//!
//! Positives perform an external call and then write the caller's balance;
//! negatives write first and call afterwards. Both use identical tokens, so
//! only windows that straddle the two statements separate the classes.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::{Corpus, LabeledContract, VulnType};

pub const EXTERNAL_CALL: &str = "msg.sender.call.value(amount)(\"\");";
pub const STATE_WRITE: &str = "balances[msg.sender] = 0;";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub positives: usize,
    pub negatives: usize,
    pub seed: u64,
    /// Filler functions besides the one holding the motif.
    pub extra_functions: Range<usize>,
    /// Filler statements per function body section.
    pub statements: Range<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            positives: 1000,
            negatives: 1000,
            seed: 0,
            extra_functions: 1..4,
            statements: 1..5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub contract: LabeledContract,
    /// Byte span covering both motif statements.
    pub motif: Range<usize>,
}

const NAMES: &[&str] = &[
    "total", "count", "limit", "fee", "rate", "supply", "index", "price", "reward", "stake", "epoch", "quota",
];
const EVENTS: &[&str] = &["Deposit", "Update", "Transfer", "Sync", "Claim"];

fn filler<R: Rng>(rng: &mut R) -> String {
    let v = *NAMES.choose(rng).unwrap();
    let w = *NAMES.choose(rng).unwrap();
    let n: u32 = rng.gen_range(0..1000);
    match rng.gen_range(0..8) {
        0 => format!("uint256 {v}Local = {n};"),
        1 => format!("{v} = {w} + {n};"),
        2 => format!("require({v} > {n});"),
        3 => format!("{v} -= {w};"),
        4 => format!("emit {}({v}, {w});", EVENTS.choose(rng).unwrap()),
        5 => format!("if ({v} < {n}) {{ {w} = {v}; }}"),
        6 => format!("{v}++;"),
        _ => format!("for (uint i = 0; i < {n}; i++) {{ {v} += i; }}"),
    }
}

fn push_statements<R: Rng>(src: &mut String, rng: &mut R, range: &Range<usize>) {
    for _ in 0..rng.gen_range(range.clone()) {
        src.push_str("        ");
        src.push_str(&filler(rng));
        src.push('\n');
    }
}

fn contract<R: Rng>(rng: &mut R, idx: usize, positive: bool, cfg: &SynthConfig) -> (String, Range<usize>) {
    let mut src = String::new();
    src.push_str("pragma solidity ^0.4.24;\n\n");
    src.push_str(&format!("contract Vault{idx} {{\n"));
    src.push_str("    mapping(address => uint) public balances;\n");
    for v in NAMES.choose_multiple(rng, 3) {
        src.push_str(&format!("    uint public {v};\n"));
    }
    let extra = rng.gen_range(cfg.extra_functions.clone());
    let motif_at = rng.gen_range(0..=extra);
    let mut motif = 0..0;
    for f in 0..=extra {
        let name = NAMES.choose(rng).unwrap();
        src.push('\n');
        if f == motif_at {
            src.push_str(&format!("    function withdraw{f}(uint amount) public {{\n"));
            push_statements(&mut src, rng, &cfg.statements);
            let (first, second) = if positive {
                (EXTERNAL_CALL, STATE_WRITE)
            } else {
                (STATE_WRITE, EXTERNAL_CALL)
            };
            src.push_str("        ");
            let start = src.len();
            src.push_str(first);
            src.push_str("\n        ");
            src.push_str(second);
            motif = start..src.len();
            src.push('\n');
            push_statements(&mut src, rng, &cfg.statements);
        } else {
            src.push_str(&format!("    function set{f}{name}(uint value) public {{\n"));
            push_statements(&mut src, rng, &cfg.statements);
        }
        src.push_str("    }\n");
    }
    src.push_str("}\n");
    (src, motif)
}

/// Generates the samples in a seeded, class-interleaved order.
pub fn reentrancy_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<bool> = std::iter::repeat_n(true, cfg.positives)
        .chain(std::iter::repeat_n(false, cfg.negatives))
        .collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, positive)| {
            let (source, motif) = contract(&mut rng, i, positive, cfg);
            let contract = LabeledContract::new(format!("synth-{i:05}"), source, VulnType::Reentrancy, u8::from(positive))?;
            Ok(SynthSample { contract, motif })
        })
        .collect()
}

pub fn reentrancy_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    Corpus::new(reentrancy_samples(cfg)?.into_iter().map(|s| s.contract).collect())
}
