use std::collections::{BTreeMap, VecDeque};

use crate::datasets::{assemble, draw_episode_indices, Episode, EpisodeSpec};
use crate::error::{reject, Error, Result};
use crate::inversion::{ClassKey, PseudoTask};
use crate::nn::ImageBatch;
use crate::seed;

/// Bounded FIFO of recovered pseudo-tasks.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    tasks: VecDeque<PseudoTask>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return reject("bank capacity must be at least 1");
        }
        Ok(MemoryBank {
            capacity,
            tasks: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Append `task`, evicting the oldest one when full.
    pub fn push(&mut self, task: PseudoTask) {
        if self.tasks.len() == self.capacity {
            self.tasks.pop_front();
        }
        self.tasks.push_back(task);
    }

    pub fn tasks(&self) -> impl Iterator<Item = &PseudoTask> {
        self.tasks.iter()
    }

    /// Stored images per class key, across every task in the bank.
    pub fn class_index(&self) -> BTreeMap<ClassKey, ImageBatch> {
        let mut index: BTreeMap<ClassKey, ImageBatch> = BTreeMap::new();
        for task in &self.tasks {
            let b = &task.images;
            for (i, &label) in task.labels.iter().enumerate() {
                index
                    .entry(task.class_keys[label].clone())
                    .or_insert_with(|| ImageBatch::empty(b.height, b.width, b.channels))
                    .push(b.image(i));
            }
        }
        index
    }
}

/// An episode whose classes are drawn across all stored tasks.
pub fn replay_episode_from_bank(bank: &MemoryBank, spec: EpisodeSpec, seed: u64) -> Result<Episode<ClassKey>> {
    if spec.way == 0 || spec.shot + spec.query == 0 {
        return reject("replay episode needs at least one class and one sample");
    }
    let index = bank.class_index();
    let need = spec.shot + spec.query;
    let eligible: Vec<(&ClassKey, &ImageBatch)> = index.iter().filter(|(_, imgs)| imgs.len() >= need).collect();
    if eligible.len() < spec.way {
        return Err(Error::InsufficientBank(format!(
            "{} classes hold at least {need} images; a {}-way episode needs {}",
            eligible.len(),
            spec.way,
            spec.way
        )));
    }
    let first = eligible[0].1;
    let mut all = ImageBatch::empty(first.height, first.width, first.channels);
    let mut pools = Vec::with_capacity(eligible.len());
    for (_, imgs) in &eligible {
        let start = all.len();
        all.append(imgs);
        pools.push((start..all.len()).collect::<Vec<usize>>());
    }
    let pool_refs: Vec<&[usize]> = pools.iter().map(Vec::as_slice).collect();
    let mut rng = seed::rng(seed);
    let (chosen, sup, qry) = draw_episode_indices(&pool_refs, spec, &mut rng)?;
    let class_map = chosen.iter().map(|&p| eligible[p].0.clone()).collect();
    Ok(assemble(&all, &sup, &qry, class_map))
}
