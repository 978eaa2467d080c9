use crate::noise::NoiseSource;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(NamedParam { name, value });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Maps a flat coordinate to `(param index, offset)`.
    pub fn locate(&self, mut coord: usize) -> (usize, usize) {
        for (i, p) in self.entries.iter().enumerate() {
            if coord < p.value.len() {
                return (i, coord);
            }
            coord -= p.value.len();
        }
        panic!("coordinate out of range");
    }
}

/// Gaussian weights with variance `gain² / fan_in`.
pub(crate) fn dense(rows: usize, cols: usize, gain: f64, rng: &mut NoiseSource) -> Tensor {
    let scale = gain / (rows as f64).sqrt();
    let mut t = rng.normal_tensor(rows, cols);
    t.data_mut().iter_mut().for_each(|x| *x *= scale);
    t
}
