//! Batch samplers over utterance indices.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One training example: utterance index and speaker class.
pub type Sample = (usize, usize);

pub trait BatchSampler {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Sample>;
}

/// Epoch-wise shuffling over all utterances.
#[derive(Clone, Debug)]
pub struct ShuffleSampler {
    samples: Vec<Sample>,
    queue: Vec<Sample>,
}

impl ShuffleSampler {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        Ok(ShuffleSampler {
            samples,
            queue: Vec::new(),
        })
    }
}

impl BatchSampler for ShuffleSampler {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if self.queue.is_empty() {
                self.queue = self.samples.clone();
                self.queue.shuffle(rng);
            }
            batch.push(self.queue.pop().expect("refilled"));
        }
        batch
    }
}

/// Utterances of one speech domain, grouped by speaker.
#[derive(Clone, Debug)]
pub struct Domain {
    pub id: String,
    /// Speaker class to utterance indices.
    pub speakers: BTreeMap<usize, Vec<usize>>,
    /// The in-domain set contributes all of its speakers to every pool.
    pub in_domain: bool,
}

/// Balances domains by drawing the same number of speakers from each, one
/// utterance per drawn speaker, into a pool that batches consume without
/// replacement; an exhausted pool is regenerated.
#[derive(Clone, Debug)]
pub struct DomainBalancedSampler {
    domains: Vec<Domain>,
    balance_count: usize,
    pool: Vec<Sample>,
}

impl DomainBalancedSampler {
    pub fn new(domains: Vec<Domain>, balance_count: usize) -> Result<Self> {
        if domains.is_empty() || balance_count == 0 {
            return Err(Error::Config("the balanced sampler needs domains and a positive balance count".into()));
        }
        for d in &domains {
            if d.speakers.is_empty() || d.speakers.values().any(|u| u.is_empty()) {
                return Err(Error::Config(format!("domain `{}` has no utterances", d.id)));
            }
            if !d.in_domain && d.speakers.len() < balance_count {
                return Err(Error::Config(format!(
                    "domain `{}` has {} speakers, fewer than the balance count {balance_count}",
                    d.id,
                    d.speakers.len()
                )));
            }
        }
        Ok(DomainBalancedSampler {
            domains,
            balance_count,
            pool: Vec::new(),
        })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    /// A fresh shuffled pool, one utterance per selected speaker.
    pub fn make_pool(&self, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut pool = Vec::new();
        for d in &self.domains {
            let speakers: Vec<(&usize, &Vec<usize>)> = d.speakers.iter().collect();
            let chosen: Vec<&(&usize, &Vec<usize>)> = if d.in_domain {
                speakers.iter().collect()
            } else {
                speakers.choose_multiple(rng, self.balance_count).collect()
            };
            for (spk, utts) in chosen {
                pool.push((utts[rng.gen_range(0..utts.len())], **spk));
            }
        }
        pool.shuffle(rng);
        pool
    }
}

impl BatchSampler for DomainBalancedSampler {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if self.pool.is_empty() {
                self.pool = self.make_pool(rng);
            }
            batch.push(self.pool.pop().expect("regenerated"));
        }
        batch
    }
}
