use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Parameter groups, the unit of transfer and freezing decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Fpn,
    RpnHead,
    RoiHead,
    /// Projection head contrasting sampled anchors by objectness label.
    ObjContrastHead,
    /// Projection head contrasting RoI features by category.
    RoiContrastHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Fpn,
        ParamGroup::RpnHead,
        ParamGroup::RoiHead,
        ParamGroup::ObjContrastHead,
        ParamGroup::RoiContrastHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Fpn => "fpn",
            ParamGroup::RpnHead => "rpn_head",
            ParamGroup::RoiHead => "roi_head",
            ParamGroup::ObjContrastHead => "obj_contrast_head",
            ParamGroup::RoiContrastHead => "roi_contrast_head",
        }
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown parameter group `{s}`"))
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    Fan {
        fan_in: usize,
        gain: f64,
    },
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

impl ParamMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub meta: Vec<ParamMeta>,
    pub values: Vec<Vec<f32>>,
}

/// Handle to one tensor of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pid(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self {
            meta: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Pid {
        let meta = ParamMeta {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
        };
        self.values.push(vec![0.0; meta.len()]);
        self.meta.push(meta);
        Pid(self.meta.len() - 1)
    }

    pub fn get(&self, p: Pid) -> &[f32] {
        &self.values[p.0]
    }

    pub fn get_mut(&mut self, p: Pid) -> &mut [f32] {
        &mut self.values[p.0]
    }

    pub fn find(&self, name: &str) -> Option<Pid> {
        self.meta.iter().position(|m| m.name == name).map(Pid)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            meta: self.meta.clone(),
            values: self.meta.iter().map(|m| vec![0.0; m.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<Pid> {
        (0..self.len())
            .filter(|&i| self.meta[i].group == group)
            .map(Pid)
            .collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().flatten().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Fills `values` from a stream seeded by `seed`.
pub fn init_tensor(values: &mut [f32], init: Init, seed: u64) {
    let std = match init {
        Init::Zeros => {
            values.fill(0.0);
            return;
        }
        Init::Fan { fan_in, gain } => (gain / fan_in.max(1) as f64).sqrt(),
        Init::Normal(s) => s,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in values.iter_mut() {
        *v = dist.sample(&mut rng) as f32;
    }
}

/// SGD with momentum and decoupled-from-loss L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: ParamStore,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    /// One update. Tensors whose `frozen` flag is set are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f32, frozen: &[bool]) {
        for (i, &skip) in frozen.iter().enumerate().take(params.len()) {
            if skip {
                continue;
            }
            let w = &mut params.values[i];
            let v = &mut self.velocity.values[i];
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(&grads.values[i]) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}
