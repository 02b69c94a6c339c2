use rand::Rng;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Whether an entry is optimized or a fixed statistic carried alongside.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub kind: EntryKind,
}

/// Named, ordered storage for the tensors of one network part.
///
/// Layers keep [`ParamId`]s into the store; gradients use the same layout
/// through [`Grads`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> ParamId {
        self.push(name.into(), shape, data, EntryKind::Weight)
    }

    pub fn add_buffer(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f32>,
    ) -> ParamId {
        self.push(name.into(), shape, data, EntryKind::Buffer)
    }

    fn push(&mut self, name: String, shape: &[usize], data: Vec<f32>, kind: EntryKind) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            data,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].data
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Number of optimizable scalars (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Weight)
            .map(|e| e.data.len())
            .sum()
    }
}

/// Gradient buffers mirroring a [`ParamStore`]; buffers get empty slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    bufs: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            bufs: store
                .entries
                .iter()
                .map(|e| match e.kind {
                    EntryKind::Weight => vec![0.0; e.data.len()],
                    EntryKind::Buffer => Vec::new(),
                })
                .collect(),
        }
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.bufs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.bufs[id.0]
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.bufs
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f32]) {
        for (a, b) in self.bufs[id.0].iter_mut().zip(g) {
            *a += *b;
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Largest absolute gradient component; 0 for an all-zero set.
    pub fn max_abs(&self) -> f32 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Fan-in-scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}
