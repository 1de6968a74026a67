//! Seeded synthetic corpora: a planted-signal classification task and an
//! unlabeled character stream.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds;

/// Characters owned by each class.
pub const CLASS_ALPHABETS: [&str; 6] = ["abc", "def", "ghi", "jkl", "mno", "pqr"];
/// Characters that carry no class signal.
pub const FILLER: &str = "stuvwxyz";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedTask {
    pub num_classes: usize,
    /// Characters per document.
    pub length: usize,
    /// Probability that a signal character comes from the document's
    /// target class rather than another class.
    pub signal: f64,
    /// Probability that a character is filler.
    pub filler_rate: f64,
}

impl Default for PlantedTask {
    fn default() -> Self {
        Self {
            num_classes: 2,
            length: 15,
            signal: 0.75,
            filler_rate: 0.4,
        }
    }
}

impl PlantedTask {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > CLASS_ALPHABETS.len() {
            return Err(Error::contract(format!(
                "num_classes must lie in 1..={}",
                CLASS_ALPHABETS.len()
            )));
        }
        if self.length == 0 {
            return Err(Error::contract("length must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.signal) || !(0.0..1.0).contains(&self.filler_rate) {
            return Err(Error::contract("signal must lie in [0, 1] and filler_rate in [0, 1)"));
        }
        Ok(())
    }

    /// The class whose characters occur most often, or `None` on a tie.
    pub fn majority_class(&self, text: &str) -> Option<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for ch in text.chars() {
            if let Some(c) = CLASS_ALPHABETS[..self.num_classes]
                .iter()
                .position(|a| a.contains(ch))
            {
                counts[c] += 1;
            }
        }
        let best = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &n)| n == best);
        let (c, _) = winners.next()?;
        if winners.next().is_some() || best == 0 {
            return None;
        }
        Some(c)
    }

    /// `n` labeled documents; the label is always the majority class of
    /// the document's own characters (tied draws are redrawn).
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<(usize, String)>> {
        self.validate()?;
        let mut rng = seeds::rng(seed, 1);
        let filler: Vec<char> = FILLER.chars().collect();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let target = rng.random_range(0..self.num_classes);
            let text: String = (0..self.length)
                .map(|_| {
                    if rng.random::<f64>() < self.filler_rate {
                        return filler[rng.random_range(0..filler.len())];
                    }
                    let class = if self.num_classes == 1 || rng.random::<f64>() < self.signal {
                        target
                    } else {
                        let other = rng.random_range(0..self.num_classes - 1);
                        if other >= target {
                            other + 1
                        } else {
                            other
                        }
                    };
                    let chars: Vec<char> = CLASS_ALPHABETS[class].chars().collect();
                    chars[rng.random_range(0..chars.len())]
                })
                .collect();
            if let Some(label) = self.majority_class(&text) {
                out.push((label, text));
            }
        }
        Ok(out)
    }
}

/// `n_docs` documents of lowercase words separated by single spaces, each
/// `length` characters long.
pub fn random_text(n_docs: usize, length: usize, seed: u64) -> Vec<String> {
    let mut rng = seeds::rng(seed, 2);
    (0..n_docs)
        .map(|_| {
            let mut doc = String::with_capacity(length);
            while doc.len() < length {
                if !doc.is_empty() {
                    doc.push(' ');
                }
                let word = rng.random_range(1..=8);
                for _ in 0..word {
                    doc.push(char::from(b'a' + rng.random_range(0..26u8)));
                }
            }
            doc.truncate(length);
            doc
        })
        .collect()
}
