//! Synthetic prompt/response tasks with machine-checkable answers.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, TokenId};
use crate::error::{Error, Result};
use crate::slotting::Sample;

/// Token ids reserved after the model's special tokens.
pub const SEP: TokenId = 4;
pub const FILL: TokenId = 5;
/// First token id carrying a payload value.
pub const FIRST_VALUE: TokenId = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    ModsumChain,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "modsum-chain" => Ok(Self::ModsumChain),
            _ => Err(Error::Argument(format!("unknown task {s:?}"))),
        }
    }
}

/// Shape of a task's samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    /// Payload lengths are drawn uniformly from `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct payload values.
    pub values: u32,
}

impl TaskSpec {
    /// The response for a payload of raw values.
    pub fn respond(&self, payload: &[u32]) -> Vec<u32> {
        match self.task {
            Task::Copy => payload.to_vec(),
            Task::Reverse => payload.iter().rev().copied().collect(),
            Task::ModsumChain => payload
                .iter()
                .scan(0, |acc, &v| {
                    *acc = (*acc + v) % self.values;
                    Some(*acc)
                })
                .collect(),
        }
    }

    /// Copy and modsum prompts pad the payload to a fixed width so that a
    /// response token sits at a constant distance from its source. Reverse
    /// prompts are unpadded.
    pub fn prompt(&self, payload: &[u32], bos: TokenId) -> Vec<TokenId> {
        let mut p = Vec::with_capacity(self.max_len + 2);
        p.push(bos);
        p.extend(payload.iter().map(|&v| FIRST_VALUE + v));
        if self.task != Task::Reverse {
            p.resize(1 + self.max_len, FILL);
        }
        p.push(SEP);
        p
    }

    pub fn vocab_needed(&self) -> usize {
        (FIRST_VALUE + self.values) as usize
    }

    /// Longest prompt plus longest response with its EOS.
    pub fn max_span(&self) -> usize {
        (self.max_len + 2) + (self.max_len + 1)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Argument(format!(
                "payload length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        if self.values < 2 {
            return Err(Error::Argument("a task needs at least two payload values".into()));
        }
        if self.task == Task::Reverse && self.max_len > self.values as usize {
            return Err(Error::Argument(format!(
                "reverse payloads hold distinct values, so length {} needs at least that many values",
                self.max_len
            )));
        }
        let specials = [model.pad_id, model.mask_id, model.eos_id, model.bos_id];
        if specials.iter().any(|&t| t >= SEP) {
            return Err(Error::Argument(format!("task tokens start at {SEP}; model specials must lie below")));
        }
        if self.vocab_needed() > model.vocab_size {
            return Err(Error::Argument(format!(
                "task needs {} token ids, model has {}",
                self.vocab_needed(),
                model.vocab_size
            )));
        }
        if self.max_span() > model.max_position {
            return Err(Error::Argument(format!(
                "samples span up to {} positions, model allows {}",
                self.max_span(),
                model.max_position
            )));
        }
        Ok(())
    }

    fn payload<R: Rng>(&self, rng: &mut R) -> Vec<u32> {
        let len = rng.random_range(self.min_len..=self.max_len);
        match self.task {
            Task::Reverse => {
                let mut all: Vec<u32> = (0..self.values).collect();
                all.shuffle(rng);
                all.truncate(len);
                all
            }
            _ => (0..len).map(|_| rng.random_range(0..self.values)).collect(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, bos: TokenId) -> Sample {
        let payload = self.payload(rng);
        Sample {
            prompt: self.prompt(&payload, bos),
            response: self.respond(&payload).iter().map(|&v| FIRST_VALUE + v).collect(),
        }
    }
}

/// `n` samples drawn from a seeded generator.
pub fn gen_corpus(spec: &TaskSpec, model: &ModelConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| spec.sample(&mut rng, model.bos_id)).collect())
}

pub fn write_jsonl<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task) -> TaskSpec {
        TaskSpec {
            task,
            min_len: 3,
            max_len: 6,
            values: 7,
        }
    }

    #[test]
    fn responses() {
        assert_eq!(spec(Task::Copy).respond(&[3, 1, 4]), vec![3, 1, 4]);
        assert_eq!(spec(Task::Reverse).respond(&[3, 1, 4]), vec![4, 1, 3]);
        assert_eq!(spec(Task::ModsumChain).respond(&[3, 5, 6]), vec![3, 1, 0]);
    }

    #[test]
    fn prompt_layouts() {
        assert_eq!(spec(Task::Copy).prompt(&[0, 1], 3), vec![3, 6, 7, FILL, FILL, FILL, FILL, SEP]);
        assert_eq!(spec(Task::Reverse).prompt(&[0, 1], 3), vec![3, 6, 7, SEP]);
    }

    #[test]
    fn corpus_is_seeded_and_round_trips() {
        let model = ModelConfig::desk_default(16);
        let a = gen_corpus(&spec(Task::Reverse), &model, 20, 4).unwrap();
        assert_eq!(a, gen_corpus(&spec(Task::Reverse), &model, 20, 4).unwrap());
        for s in &a {
            let mut seen = s.response.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), s.response.len());
        }
        let mut buf = Vec::new();
        write_jsonl(&a, &mut buf).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), a);
    }

    #[test]
    fn rejects_oversized() {
        let small = ModelConfig {
            max_position: 10,
            ..ModelConfig::desk_default(16)
        };
        assert!(gen_corpus(&spec(Task::Copy), &small, 1, 0).is_err());
        let narrow = ModelConfig::desk_default(8);
        assert!(gen_corpus(&spec(Task::Copy), &narrow, 1, 0).is_err());
        let too_long = TaskSpec { max_len: 9, ..spec(Task::Reverse) };
        assert!(too_long.validate(&ModelConfig::desk_default(16)).is_err());
    }
}
