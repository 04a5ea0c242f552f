//! Age groups, one-hot labels and their spatial broadcast into condition maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FeatureMap, ImageTensor};

pub const NUM_GROUPS: usize = 5;

/// One-hot label over the five age groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgeGroupLabel {
    group_index: usize,
}

impl AgeGroupLabel {
    pub fn new(group_index: usize) -> Result<Self> {
        if group_index >= NUM_GROUPS {
            return Err(Error::Argument(format!(
                "group index {group_index} out of 0..{NUM_GROUPS}"
            )));
        }
        Ok(AgeGroupLabel { group_index })
    }

    /// Parses a one-hot vector; anything but a single 1 among 0s is rejected.
    pub fn from_onehot(onehot: &[f32]) -> Result<Self> {
        if onehot.len() != NUM_GROUPS {
            return Err(Error::Invariant(format!(
                "one-hot label needs {NUM_GROUPS} entries, got {}",
                onehot.len()
            )));
        }
        let ones: Vec<usize> = onehot
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        let zeros = onehot.iter().filter(|&&v| v == 0.0).count();
        match ones.as_slice() {
            [idx] if zeros == NUM_GROUPS - 1 => Ok(AgeGroupLabel { group_index: *idx }),
            _ => Err(Error::Invariant(format!("{onehot:?} is not one-hot"))),
        }
    }

    pub fn index(self) -> usize {
        self.group_index
    }

    pub fn onehot(self) -> [f32; NUM_GROUPS] {
        let mut v = [0.0; NUM_GROUPS];
        v[self.group_index] = 1.0;
        v
    }

    pub fn all() -> impl Iterator<Item = AgeGroupLabel> {
        (0..NUM_GROUPS).map(|group_index| AgeGroupLabel { group_index })
    }
}

/// Five ascending, contiguous age ranges. Range `k` covers
/// `lower_bounds[k] ..= lower_bounds[k+1] - 1`; the last range is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct AgeGroupScheme {
    lower_bounds: [u32; NUM_GROUPS],
}

impl Default for AgeGroupScheme {
    fn default() -> Self {
        AgeGroupScheme {
            lower_bounds: [11, 21, 31, 41, 51],
        }
    }
}

impl AgeGroupScheme {
    pub fn new(lower_bounds: [u32; NUM_GROUPS]) -> Result<Self> {
        if lower_bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "age lower bounds must be strictly ascending, got {lower_bounds:?}"
            )));
        }
        Ok(AgeGroupScheme { lower_bounds })
    }

    pub fn lower_bounds(&self) -> [u32; NUM_GROUPS] {
        self.lower_bounds
    }

    /// Inclusive range of group `k`; `None` as upper bound means open-ended.
    pub fn range(&self, k: usize) -> (u32, Option<u32>) {
        let hi = self.lower_bounds.get(k + 1).map(|next| next - 1);
        (self.lower_bounds[k], hi)
    }

    /// Display name of group `k`, e.g. `21-30` or `51+`.
    pub fn group_name(&self, k: usize) -> String {
        match self.range(k) {
            (lo, Some(hi)) => format!("{lo}-{hi}"),
            (lo, None) => format!("{lo}+"),
        }
    }

    /// Representative age of a group: range midpoint, or for the open-ended
    /// last group the lower bound plus half the preceding range's width.
    pub fn midpoint(&self, k: usize) -> f64 {
        match self.range(k) {
            (lo, Some(hi)) => (lo + hi) as f64 / 2.0,
            (lo, None) => {
                let (plo, phi) = self.range(k - 1);
                lo as f64 + (phi.unwrap_or(plo) - plo) as f64 / 2.0
            }
        }
    }
}

impl TryFrom<Vec<u32>> for AgeGroupScheme {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        let arr: [u32; NUM_GROUPS] = v.try_into().map_err(|v: Vec<u32>| {
            Error::Config(format!(
                "age scheme needs {NUM_GROUPS} lower bounds, got {}",
                v.len()
            ))
        })?;
        AgeGroupScheme::new(arr)
    }
}

impl From<AgeGroupScheme> for Vec<u32> {
    fn from(s: AgeGroupScheme) -> Self {
        s.lower_bounds.to_vec()
    }
}

impl fmt::Display for AgeGroupScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = (0..NUM_GROUPS).map(|k| self.group_name(k)).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

pub fn bin_age(age: u32, scheme: &AgeGroupScheme) -> Result<AgeGroupLabel> {
    if age < scheme.lower_bounds[0] {
        return Err(Error::OutOfDomain {
            age,
            scheme: scheme.to_string(),
        });
    }
    let idx = scheme
        .lower_bounds
        .iter()
        .rposition(|&lo| age >= lo)
        .expect("age is above the first lower bound");
    AgeGroupLabel::new(idx)
}

/// `H x W x 5` map whose only all-ones channel is the label's group.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMap(FeatureMap);

impl ConditionMap {
    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    /// Group recovered by per-pixel channel argmax at `(y, x)`.
    pub fn argmax_at(&self, y: usize, x: usize) -> usize {
        (0..NUM_GROUPS)
            .max_by(|&a, &b| self.0.get(a, y, x).total_cmp(&self.0.get(b, y, x)))
            .unwrap_or(0)
    }
}

pub fn broadcast_condition(label: AgeGroupLabel, h: usize, w: usize) -> Result<ConditionMap> {
    if h == 0 || w == 0 {
        return Err(Error::Argument(format!(
            "condition map needs positive dims, got {h}x{w}"
        )));
    }
    let mut map = FeatureMap::filled(NUM_GROUPS, h, w, 0.0);
    let plane = h * w;
    let k = label.index();
    map.data_mut()[k * plane..(k + 1) * plane].fill(1.0);
    Ok(ConditionMap(map))
}

/// Image channels first (0-2), condition channels after (3-7).
pub fn concat_input(image: &ImageTensor, cond: &ConditionMap) -> Result<FeatureMap> {
    let (img, c) = (image.map(), cond.map());
    if !img.same_spatial(c) {
        return Err(Error::Shape(format!(
            "image is {}x{} but condition map is {}x{}",
            img.height(),
            img.width(),
            c.height(),
            c.width()
        )));
    }
    let mut data = Vec::with_capacity(img.data().len() + c.data().len());
    data.extend_from_slice(img.data());
    data.extend_from_slice(c.data());
    FeatureMap::new(3 + NUM_GROUPS, img.height(), img.width(), data)
}
