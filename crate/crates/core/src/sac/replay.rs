use rand::Rng;

use super::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// One environment step. `state` and `next_state` are empty when the task
/// has no low-dimensional state.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: PointCloud,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    /// Genuine termination only; timeouts keep bootstrapping.
    pub done: bool,
    pub next_obs: PointCloud,
    pub next_state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct StoredCloud {
    positions: Vec<f32>,
    colors: Option<Vec<f32>>,
}

impl StoredCloud {
    fn pack(c: &PointCloud) -> Self {
        let flat = |v: &[Point3]| v.iter().flatten().map(|&x| x as f32).collect();
        Self { positions: flat(&c.positions), colors: c.colors.as_deref().map(flat) }
    }

    fn unpack(&self) -> PointCloud {
        let pts = |v: &[f32]| v.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
        PointCloud { positions: pts(&self.positions), colors: self.colors.as_deref().map(pts) }
    }

    fn write(&self, w: &mut ByteWriter) {
        w.f32s(&self.positions);
        w.bool(self.colors.is_some());
        if let Some(c) = &self.colors {
            w.f32s(c);
        }
    }

    fn read(r: &mut ByteReader) -> Result<Self> {
        let positions = r.f32s()?;
        let colors = if r.bool()? { Some(r.f32s()?) } else { None };
        if positions.len() % 3 != 0 || colors.as_ref().is_some_and(|c| c.len() != positions.len()) {
            return Err(Error::Checkpoint("malformed stored cloud".into()));
        }
        Ok(Self { positions, colors })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stored {
    obs: StoredCloud,
    state: Vec<f64>,
    action: Vec<f64>,
    reward: f64,
    done: bool,
    next_obs: StoredCloud,
    next_state: Vec<f64>,
}

/// Fixed-capacity ring buffer of ragged transitions. Clouds are kept in
/// single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Stored>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), next: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.obs.is_empty() || t.next_obs.is_empty() {
            return Err(Error::InvalidArgument("transitions need non-empty observations".into()));
        }
        if t.action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument("action outside [-1, 1]".into()));
        }
        let s = Stored {
            obs: StoredCloud::pack(&t.obs),
            state: t.state.clone(),
            action: t.action.clone(),
            reward: t.reward,
            done: t.done,
            next_obs: StoredCloud::pack(&t.next_obs),
            next_state: t.next_state.clone(),
        };
        if self.items.len() < self.capacity {
            self.items.push(s);
        } else {
            self.items[self.next] = s;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Transition {
        let s = &self.items[i];
        Transition {
            obs: s.obs.unpack(),
            state: s.state.clone(),
            action: s.action.clone(),
            reward: s.reward,
            done: s.done,
            next_obs: s.next_obs.unpack(),
            next_state: s.next_state.clone(),
        }
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::InvalidState("cannot sample from an empty buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| self.get(i)).collect())
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.usize(self.capacity);
        w.usize(self.next);
        w.usize(self.items.len());
        for s in &self.items {
            s.obs.write(w);
            w.f64s(&s.state);
            w.f64s(&s.action);
            w.f64(s.reward);
            w.bool(s.done);
            s.next_obs.write(w);
            w.f64s(&s.next_state);
        }
    }

    pub fn read(r: &mut ByteReader) -> Result<Self> {
        let capacity = r.usize()?;
        let next = r.usize()?;
        let n = r.usize()?;
        if capacity == 0 || n > capacity || next >= capacity {
            return Err(Error::Checkpoint("malformed replay buffer header".into()));
        }
        let items = (0..n)
            .map(|_| {
                Ok(Stored {
                    obs: StoredCloud::read(r)?,
                    state: r.f64s()?,
                    action: r.f64s()?,
                    reward: r.f64()?,
                    done: r.bool()?,
                    next_obs: StoredCloud::read(r)?,
                    next_state: r.f64s()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { capacity, items, next })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn transition(tag: f64) -> Transition {
        let cloud = PointCloud::new(vec![[tag, 0.0, 0.0]]);
        Transition {
            obs: cloud.clone(),
            state: vec![tag],
            action: vec![0.0],
            reward: tag,
            done: false,
            next_obs: cloud,
            next_state: vec![tag],
        }
    }

    #[test]
    fn oldest_is_evicted() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..4 {
            b.push(&transition(i as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| b.get(i).reward).collect();
        assert_eq!(rewards, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn empty_sample_is_error() {
        let b = ReplayBuffer::new(3).unwrap();
        assert!(matches!(b.sample(1, &mut seeded(0)), Err(Error::InvalidState(_))));
    }

    #[test]
    fn rejects_out_of_range_action() {
        let mut b = ReplayBuffer::new(3).unwrap();
        let mut t = transition(0.0);
        t.action = vec![1.5];
        assert!(b.push(&t).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            b.push(&transition(i as f64)).unwrap();
        }
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for i in b.sample_indices(draws, &mut seeded(9)).unwrap() {
            counts[i] += 1;
        }
        let expect = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn serialization_round_trip() {
        let mut b = ReplayBuffer::new(4).unwrap();
        for i in 0..6 {
            let mut t = transition(i as f64 * 0.1);
            t.obs = PointCloud::with_colors(vec![[0.1, 0.2, 0.3]], vec![[1.0, 0.0, 0.5]]).unwrap();
            b.push(&t).unwrap();
        }
        let mut w = ByteWriter::new();
        b.write(&mut w);
        let back = ReplayBuffer::read(&mut ByteReader::new(&w.buf)).unwrap();
        assert_eq!(back, b);
    }
}
