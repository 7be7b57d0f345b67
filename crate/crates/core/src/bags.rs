use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn complement(self) -> Self {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("bag label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub id: u32,
    pub label: Label,
    pub pixels: Vec<usize>,
}

/// Disjoint labelled groups of pixel indices. Pixels in no bag are unlabeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagSet {
    bags: Vec<Bag>,
}

impl BagSet {
    /// Checks that bags are non-empty, disjoint, in range and uniquely numbered.
    pub fn new(bags: Vec<Bag>, n_pixels: usize) -> Result<Self> {
        let set = Self { bags };
        set.check(n_pixels)?;
        Ok(set)
    }

    pub fn check(&self, n_pixels: usize) -> Result<()> {
        let mut seen = vec![false; n_pixels];
        let mut ids = BTreeSet::new();
        for bag in &self.bags {
            if bag.pixels.is_empty() {
                return Err(Error::InvalidInput(format!("bag {} is empty", bag.id)));
            }
            if !ids.insert(bag.id) {
                return Err(Error::InvalidInput(format!("duplicate bag id {}", bag.id)));
            }
            for &p in &bag.pixels {
                if p >= n_pixels {
                    return Err(Error::PixelOutOfRange { index: p, n_pixels });
                }
                if std::mem::replace(&mut seen[p], true) {
                    return Err(Error::InvalidInput(format!("pixel {p} is in more than one bag")));
                }
            }
        }
        Ok(())
    }

    /// Training needs at least one bag of each label.
    pub fn check_trainable(&self) -> Result<()> {
        if self.bags.is_empty() {
            return Err(Error::NoLabeledPixels);
        }
        if !self.bags.iter().any(|b| b.label == Label::Positive) {
            return Err(Error::NoPositiveBag);
        }
        if !self.bags.iter().any(|b| b.label == Label::Negative) {
            return Err(Error::NoNegativeBag);
        }
        Ok(())
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn into_bags(self) -> Vec<Bag> {
        self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn next_id(&self) -> u32 {
        self.bags.iter().map(|b| b.id + 1).max().unwrap_or(0)
    }

    /// Per-pixel label, `None` for unlabeled pixels.
    pub fn label_map(&self, n_pixels: usize) -> Vec<Option<Label>> {
        let mut map = vec![None; n_pixels];
        for bag in &self.bags {
            for &p in &bag.pixels {
                if p < n_pixels {
                    map[p] = Some(bag.label);
                }
            }
        }
        map
    }

    /// Labelled pixels of one kind, in ascending index order.
    pub fn pixels_with(&self, label: Label) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .bags
            .iter()
            .filter(|b| b.label == label)
            .flat_map(|b| b.pixels.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn labeled_pixels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.bags.iter().flat_map(|b| b.pixels.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    pub fn bag_of(&self, pixel: usize) -> Option<&Bag> {
        self.bags.iter().find(|b| b.pixels.contains(&pixel))
    }

    /// Two bag sets are equivalent when every pixel carries the same label in
    /// both. Training only sees per-pixel labels, so grouping is immaterial.
    pub fn membership_equivalent(&self, other: &BagSet, n_pixels: usize) -> bool {
        self.label_map(n_pixels) == other.label_map(n_pixels)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str, n_pixels: usize) -> Result<Self> {
        let set: BagSet = serde_json::from_str(text)?;
        set.check(n_pixels)?;
        Ok(set)
    }

    /// Complements the label of every pixel in `unit`. The pixels leave their
    /// current bags and are gathered into one fresh bag carrying the
    /// complemented label per source label; bags left empty are dropped.
    pub fn flip(&self, unit: &[usize]) -> Result<BagSet> {
        let moving: BTreeSet<usize> = unit.iter().copied().collect();
        let mut found = BTreeSet::new();
        let mut to_positive = Vec::new();
        let mut to_negative = Vec::new();
        let mut bags = Vec::with_capacity(self.bags.len() + 2);
        for bag in &self.bags {
            let mut kept = Vec::with_capacity(bag.pixels.len());
            for &p in &bag.pixels {
                if moving.contains(&p) {
                    found.insert(p);
                    match bag.label {
                        Label::Negative => to_positive.push(p),
                        Label::Positive => to_negative.push(p),
                    }
                } else {
                    kept.push(p);
                }
            }
            if !kept.is_empty() {
                bags.push(Bag {
                    id: bag.id,
                    label: bag.label,
                    pixels: kept,
                });
            }
        }
        if let Some(&missing) = moving.iter().find(|p| !found.contains(p)) {
            return Err(Error::PixelNotInBag(missing));
        }
        let mut next = self.next_id();
        for (label, mut pixels) in [(Label::Positive, to_positive), (Label::Negative, to_negative)] {
            if pixels.is_empty() {
                continue;
            }
            pixels.sort_unstable();
            bags.push(Bag {
                id: next,
                label,
                pixels,
            });
            next += 1;
        }
        Ok(BagSet { bags })
    }
}

/// Free-function form of [`BagSet::flip`].
pub fn flip_labels(bags: &BagSet, unit: &[usize]) -> Result<BagSet> {
    bags.flip(unit)
}
