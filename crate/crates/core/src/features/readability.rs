//! The nine readability indices.
//!
//! Constants are the published ones:
//!
//! | index | formula |
//! |---|---|
//! | Flesch reading ease | `206.835 - 1.015·W/S - 84.6·Y/W` |
//! | Flesch–Kincaid grade | `0.39·W/S + 11.8·Y/W - 15.59` |
//! | Gunning fog | `0.4·(W/S + 100·C/W)` |
//! | Coleman–Liau | `0.0588·L - 0.296·T - 15.8`, `L = 100·letters/W`, `T = 100·S/W` |
//! | Linsear Write | `r = (easy + 3·hard)/S`; `r/2` if `r > 20`, else `r/2 - 1` |
//! | Automated readability | `4.71·letters/W + 0.5·W/S - 21.43` |
//! | Spache (revised) | `0.121·W/S + 0.082·U + 0.659`, `U` = % words not on the Spache list |
//! | Dale–Chall (new) | `0.1579·D + 0.0496·W/S`, plus `3.6365` when `D > 5`; `D` = % words not on the Dale–Chall list |
//! | SMOG | `1.0430·sqrt(C·30/S) + 3.1291` |
//!
//! `W` words, `S` sentences, `Y` syllables, `C` words of three or more
//! syllables. Text without words scores 0 on every index.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize;
use crate::error::{Error, Result};

const DALE_CHALL_BUNDLED: &str = include_str!("../../data/dale_chall_easy.txt");
const SPACHE_BUNDLED: &str = include_str!("../../data/spache_easy.txt");

/// Familiar-word list: one lowercase word per line.
#[derive(Clone, Debug)]
pub struct EasyWords(HashSet<String>);

impl EasyWords {
    pub fn parse(contents: &str) -> Self {
        Self(
            contents
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let list = Self::parse(&contents);
        if list.0.is_empty() {
            return Err(Error::Validation(format!(
                "word list {} is empty",
                path.display()
            )));
        }
        Ok(list)
    }

    pub fn dale_chall() -> Self {
        Self::parse(DALE_CHALL_BUNDLED)
    }

    pub fn spache() -> Self {
        Self::parse(SPACHE_BUNDLED)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Word lists used by the vocabulary-based indices.
#[derive(Clone, Debug)]
pub struct WordLists {
    pub dale_chall: EasyWords,
    pub spache: EasyWords,
}

impl Default for WordLists {
    fn default() -> Self {
        Self {
            dale_chall: EasyWords::dale_chall(),
            spache: EasyWords::spache(),
        }
    }
}

/// Raw counts every index is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TextCounts {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
    pub letters: usize,
    pub polysyllables: usize,
    pub not_dale_chall: usize,
    pub not_spache: usize,
}

impl TextCounts {
    pub fn of(text: &str, lists: &WordLists) -> Self {
        let words = tokenize::words(text);
        let mut counts = TextCounts {
            words: words.len(),
            sentences: tokenize::sentences(text).len(),
            ..Default::default()
        };
        for w in words {
            let syl = tokenize::count_syllables(w).unwrap_or(1);
            counts.syllables += syl;
            counts.letters += tokenize::letter_count(w);
            if syl >= 3 {
                counts.polysyllables += 1;
            }
            if !lists.dale_chall.contains(w) {
                counts.not_dale_chall += 1;
            }
            if !lists.spache.contains(w) {
                counts.not_spache += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Readability {
    pub flesch_reading_ease: f64,
    pub flesch_kincaid: f64,
    pub gunning_fog: f64,
    pub coleman_liau: f64,
    pub linsear_write: f64,
    pub automated_readability: f64,
    pub spache: f64,
    pub dale_chall: f64,
    pub smog: f64,
}

impl Readability {
    pub const NAMES: [&'static str; 9] = [
        "flesch_reading_ease",
        "flesch_kincaid",
        "gunning_fog",
        "coleman_liau",
        "linsear_write",
        "automated_readability",
        "spache",
        "dale_chall",
        "smog",
    ];

    pub fn from_counts(c: &TextCounts) -> Self {
        if c.words == 0 {
            return Self::default();
        }
        let w = c.words as f64;
        let s = c.sentences.max(1) as f64;
        let wps = w / s;
        let spw = c.syllables as f64 / w;
        let poly = c.polysyllables as f64;
        let letters = c.letters as f64;

        let linsear = {
            let easy = (c.words - c.polysyllables) as f64;
            let r = (easy + 3.0 * poly) / s;
            if r > 20.0 {
                r / 2.0
            } else {
                r / 2.0 - 1.0
            }
        };
        let difficult_pct = 100.0 * c.not_dale_chall as f64 / w;
        let dale_chall = 0.1579 * difficult_pct
            + 0.0496 * wps
            + if difficult_pct > 5.0 { 3.6365 } else { 0.0 };

        Self {
            flesch_reading_ease: 206.835 - 1.015 * wps - 84.6 * spw,
            flesch_kincaid: 0.39 * wps + 11.8 * spw - 15.59,
            gunning_fog: 0.4 * (wps + 100.0 * poly / w),
            coleman_liau: 0.0588 * (100.0 * letters / w) - 0.296 * (100.0 * s / w) - 15.8,
            linsear_write: linsear,
            automated_readability: 4.71 * letters / w + 0.5 * wps - 21.43,
            spache: 0.121 * wps + 0.082 * (100.0 * c.not_spache as f64 / w) + 0.659,
            dale_chall,
            smog: 1.0430 * (poly * 30.0 / s).sqrt() + 3.1291,
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.flesch_reading_ease,
            self.flesch_kincaid,
            self.gunning_fog,
            self.coleman_liau,
            self.linsear_write,
            self.automated_readability,
            self.spache,
            self.dale_chall,
            self.smog,
        ]
    }
}

pub fn readability_indices(text: &str, lists: &WordLists) -> Readability {
    Readability::from_counts(&TextCounts::of(text, lists))
}
