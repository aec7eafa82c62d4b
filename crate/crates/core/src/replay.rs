//! Fixed-capacity latent replay buffer for class-sequential training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter, ContainerKind};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    /// `[C, H, W]`.
    pub latent: Tensor,
    pub cond_id: usize,
    pub source_class: usize,
    pub insertion_step: u64,
}

impl ReplaySample {
    pub fn new(latent: Tensor, cond_id: usize, source_class: usize) -> Result<Self> {
        if latent.ndim() != 3 {
            return Err(Error::Dimension(format!("replay latent must be [C, H, W], got {:?}", latent.shape())));
        }
        if !latent.all_finite() {
            return Err(Error::Validation("replay latent contains non-finite values".into()));
        }
        Ok(ReplaySample {
            latent,
            cond_id,
            source_class,
            insertion_step: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplayPolicy {
    #[default]
    BalancedReservoir,
    UniformReservoir,
}

impl ReplayPolicy {
    fn tag(self) -> u8 {
        match self {
            ReplayPolicy::BalancedReservoir => 0,
            ReplayPolicy::UniformReservoir => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(ReplayPolicy::BalancedReservoir),
            1 => Some(ReplayPolicy::UniformReservoir),
            _ => None,
        }
    }
}

/// Stored latents are rounded to `f32`, the precision of the on-disk
/// format, so that save/load round-trips exactly. A capacity of zero keeps
/// nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    policy: ReplayPolicy,
    slots: Vec<ReplaySample>,
    /// Classes in ingestion order.
    classes: Vec<usize>,
    /// Samples offered so far (the uniform reservoir's stream position).
    offered: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, policy: ReplayPolicy) -> Self {
        ReplayBuffer {
            capacity,
            policy,
            slots: Vec::new(),
            classes: Vec::new(),
            offered: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> ReplayPolicy {
        self.policy
    }

    pub fn slots(&self) -> &[ReplaySample] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Per-class slot counts for every ingested class.
    pub fn histogram(&self) -> BTreeMap<usize, usize> {
        let mut h: BTreeMap<usize, usize> = self.classes.iter().map(|&c| (c, 0)).collect();
        for s in &self.slots {
            *h.entry(s.source_class).or_insert(0) += 1;
        }
        h
    }

    /// Slot quota of each ingested class when `k` classes share the buffer:
    /// `capacity / k`, plus one for the first `capacity % k` classes.
    pub fn quotas(capacity: usize, k: usize) -> Vec<usize> {
        (0..k).map(|i| capacity / k + usize::from(i < capacity % k)).collect()
    }

    pub fn ingest_class(&mut self, class_data: &[ReplaySample], seed: u64) -> Result<()> {
        let Some(first) = class_data.first() else {
            return Err(Error::Usage("cannot ingest an empty class".into()));
        };
        let class = first.source_class;
        if class_data.iter().any(|s| s.source_class != class) {
            return Err(Error::Usage("ingest_class needs samples from a single class".into()));
        }
        if self.classes.contains(&class) {
            return Err(Error::Usage(format!("class {class} was already ingested")));
        }
        let shape = first.latent.shape();
        let reference = self.slots.first().map_or(shape, |s| s.latent.shape());
        if let Some(bad) = class_data.iter().find(|s| s.latent.shape() != reference) {
            return Err(Error::Dimension(format!(
                "latent shape {:?} differs from buffer shape {reference:?}",
                bad.latent.shape()
            )));
        }
        self.classes.push(class);
        let base = self.offered;
        self.offered += class_data.len() as u64;
        let stamp = |i: usize| {
            let mut s = class_data[i].clone();
            binio::to_f32_precision(s.latent.data_mut());
            s.insertion_step = base + i as u64;
            s
        };
        if self.capacity == 0 {
            return Ok(());
        }
        match self.policy {
            ReplayPolicy::BalancedReservoir => {
                let quotas = Self::quotas(self.capacity, self.classes.len());
                for (ci, &c) in self.classes[..self.classes.len() - 1].iter().enumerate() {
                    let idx: Vec<usize> = (0..self.slots.len()).filter(|&i| self.slots[i].source_class == c).collect();
                    if idx.len() > quotas[ci] {
                        let mut r = rng::stream(seed, "replay:evict", c as u64);
                        let keep: Vec<usize> = idx.choose_multiple(&mut r, quotas[ci]).copied().collect();
                        let evict: Vec<usize> = idx.into_iter().filter(|i| !keep.contains(i)).collect();
                        let mut k = 0;
                        self.slots.retain(|_| {
                            let drop = evict.binary_search(&k).is_ok();
                            k += 1;
                            !drop
                        });
                    }
                }
                let quota = *quotas.last().unwrap();
                let mut r = rng::stream(seed, "replay:reservoir", class as u64);
                let mut reservoir: Vec<usize> = Vec::with_capacity(quota);
                for i in 0..class_data.len() {
                    if reservoir.len() < quota {
                        reservoir.push(i);
                    } else if quota > 0 {
                        let j = r.random_range(0..=i);
                        if j < quota {
                            reservoir[j] = i;
                        }
                    }
                }
                reservoir.sort_unstable();
                self.slots.extend(reservoir.into_iter().map(stamp));
            }
            ReplayPolicy::UniformReservoir => {
                let mut r = rng::stream(seed, "replay:reservoir", class as u64);
                for i in 0..class_data.len() {
                    let seen = base + i as u64;
                    if self.slots.len() < self.capacity {
                        self.slots.push(stamp(i));
                    } else {
                        let j = r.random_range(0..=seen);
                        if (j as usize) < self.capacity {
                            self.slots[j as usize] = stamp(i);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bytes().write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    /// Header: capacity, policy, offered count, ingested classes, slot
    /// count, latent shape; then per-slot `(cond_id, source_class,
    /// insertion_step)`; then all latents as `f32`.
    pub fn to_bytes(&self) -> ByteWriter {
        let mut w = ByteWriter::new(ContainerKind::ReplayBuffer);
        w.u64(self.capacity as u64);
        w.u8(self.policy.tag());
        w.u64(self.offered);
        w.u32(self.classes.len() as u32);
        for &c in &self.classes {
            w.u32(c as u32);
        }
        w.u64(self.slots.len() as u64);
        let shape: Vec<usize> = self.slots.first().map_or(vec![0, 0, 0], |s| s.latent.shape().to_vec());
        for d in &shape {
            w.u32(*d as u32);
        }
        for s in &self.slots {
            w.u32(s.cond_id as u32);
            w.u32(s.source_class as u32);
            w.u64(s.insertion_step);
        }
        for s in &self.slots {
            w.f32s(s.latent.data());
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, ContainerKind::ReplayBuffer)?;
        let capacity = r.u64("capacity")? as usize;
        let policy_off = r.offset();
        let tag = r.u8("policy")?;
        let policy = ReplayPolicy::from_tag(tag).ok_or_else(|| Error::Format {
            offset: policy_off,
            message: format!("unknown policy tag {tag}"),
        })?;
        let offered = r.u64("offered count")?;
        let nclasses = r.u32("class count")? as usize;
        let mut classes = Vec::with_capacity(nclasses.min(1 << 16));
        for _ in 0..nclasses {
            classes.push(r.u32("class id")? as usize);
        }
        let count_off = r.offset();
        let count = r.u64("slot count")? as usize;
        if count > capacity {
            return Err(Error::Format {
                offset: count_off,
                message: format!("{count} slots exceed capacity {capacity}"),
            });
        }
        let shape = [r.u32("shape")? as usize, r.u32("shape")? as usize, r.u32("shape")? as usize];
        let mut meta = Vec::with_capacity(count);
        for _ in 0..count {
            let cond = r.u32("cond id")? as usize;
            let class = r.u32("source class")? as usize;
            let step = r.u64("insertion step")?;
            meta.push((cond, class, step));
        }
        let per: usize = shape.iter().product();
        let mut slots = Vec::with_capacity(count);
        for (cond_id, source_class, insertion_step) in meta {
            let data = r.f32s(per, "latent payload")?;
            slots.push(ReplaySample {
                latent: Tensor::new(shape.to_vec(), data)?,
                cond_id,
                source_class,
                insertion_step,
            });
        }
        r.finish()?;
        Ok(ReplayBuffer {
            capacity,
            policy,
            slots,
            classes,
            offered,
        })
    }

    /// Class histogram as `class,count` CSV rows, with class names when
    /// given.
    pub fn histogram_csv(&self, names: Option<&[String]>) -> String {
        let mut s = String::from("class,count\n");
        for (c, n) in self.histogram() {
            let label = names.and_then(|v| v.get(c)).cloned().unwrap_or_else(|| c.to_string());
            s.push_str(&format!("{label},{n}\n"));
        }
        s
    }
}

/// Current-class data followed by the whole buffer, shuffled with `seed`.
pub fn compose_training_set(current: &[ReplaySample], buffer: &ReplayBuffer, seed: u64) -> Vec<ReplaySample> {
    let mut out: Vec<ReplaySample> = current.iter().chain(buffer.slots()).cloned().collect();
    out.shuffle(&mut rng::stream(seed, "replay:compose", 0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(c: usize, n: usize) -> Vec<ReplaySample> {
        (0..n)
            .map(|i| ReplaySample::new(Tensor::full(&[1, 1, 1], (c * 1000 + i) as f64), c, c).unwrap())
            .collect()
    }

    #[test]
    fn quota_examples() {
        let mut b = ReplayBuffer::new(100, ReplayPolicy::BalancedReservoir);
        b.ingest_class(&class(0, 500), 1).unwrap();
        assert_eq!(b.histogram()[&0], 100);
        b.ingest_class(&class(1, 500), 1).unwrap();
        assert_eq!(b.histogram().values().copied().collect::<Vec<_>>(), vec![50, 50]);
        assert_eq!(ReplayBuffer::quotas(10, 3), vec![4, 3, 3]);
    }

    #[test]
    fn ingest_errors() {
        let mut b = ReplayBuffer::new(10, ReplayPolicy::BalancedReservoir);
        assert!(matches!(b.ingest_class(&[], 0), Err(Error::Usage(_))));
        b.ingest_class(&class(0, 3), 0).unwrap();
        assert!(matches!(b.ingest_class(&class(0, 3), 0), Err(Error::Usage(_))));
        let mut mixed = class(1, 2);
        mixed.extend(class(2, 2));
        assert!(b.ingest_class(&mixed, 0).is_err());
    }

    #[test]
    fn uniform_policy_respects_capacity() {
        let mut b = ReplayBuffer::new(7, ReplayPolicy::UniformReservoir);
        for c in 0..4 {
            b.ingest_class(&class(c, 20), 9).unwrap();
            assert!(b.len() <= 7);
        }
        assert_eq!(b.len(), 7);
    }

    #[test]
    fn compose_keeps_multiset() {
        let mut b = ReplayBuffer::new(100, ReplayPolicy::BalancedReservoir);
        b.ingest_class(&class(0, 150), 2).unwrap();
        let cur = class(1, 200);
        let set = compose_training_set(&cur, &b, 3);
        assert_eq!(set.len(), 300);
        assert_eq!(set.iter().filter(|s| s.source_class == 1).count(), 200);
        let empty = ReplayBuffer::new(10, ReplayPolicy::BalancedReservoir);
        let mut perm: Vec<u64> = compose_training_set(&cur, &empty, 3)
            .iter()
            .map(|s| s.latent.data()[0] as u64)
            .collect();
        perm.sort_unstable();
        assert_eq!(perm, (1000..1200).collect::<Vec<u64>>());
    }
}
