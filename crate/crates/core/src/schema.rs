//! The attribute universe.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    /// Mutually exclusive within its region; exactly one is positive per sample.
    Value,
    /// Independent boolean.
    Accessory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub id: usize,
    pub region: String,
    pub region_idx: usize,
    pub category: String,
    pub value: String,
    pub kind: AttrKind,
}

impl AttributeDef {
    pub fn display_name(&self) -> String {
        format!("{} {} {}", self.region, self.category, self.value)
    }
}

/// Ordered attribute list; ids are dense and grouped by region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub regions: Vec<String>,
    pub attributes: Vec<AttributeDef>,
}

impl AttributeSchema {
    /// Number of attributes (`Z`).
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attr(&self, id: usize) -> &AttributeDef {
        &self.attributes[id]
    }

    /// Value attribute ids of one region, in id order.
    pub fn region_values(&self, region_idx: usize) -> Vec<usize> {
        self.attributes
            .iter()
            .filter(|a| a.region_idx == region_idx && a.kind == AttrKind::Value)
            .map(|a| a.id)
            .collect()
    }

    pub fn region_accessories(&self, region_idx: usize) -> Vec<usize> {
        self.attributes
            .iter()
            .filter(|a| a.region_idx == region_idx && a.kind == AttrKind::Accessory)
            .map(|a| a.id)
            .collect()
    }

    /// Words used by attribute templates, in first-seen order.
    pub fn words(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for a in &self.attributes {
            for w in [&a.region, &a.category, &a.value] {
                if seen.insert(w.clone()) {
                    out.push(w.clone());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut triples = HashSet::new();
        for (i, a) in self.attributes.iter().enumerate() {
            if a.id != i {
                return Err(Error::Schema(format!("attribute ids must be dense, found {} at {}", a.id, i)));
            }
            if self.regions.get(a.region_idx) != Some(&a.region) {
                return Err(Error::Schema(format!("attribute {} names unknown region {}", i, a.region)));
            }
            if !triples.insert((a.region.clone(), a.category.clone(), a.value.clone())) {
                return Err(Error::Schema(format!("duplicate attribute ({}, {}, {})", a.region, a.category, a.value)));
            }
        }
        for r in 0..self.regions.len() {
            if self.region_values(r).is_empty() {
                return Err(Error::Schema(format!("region {} has no value attributes", self.regions[r])));
            }
        }
        Ok(())
    }
}

/// Build the schema from the generator config: per region, its value
/// attributes then its accessories.
pub fn build_schema(cfg: &DataConfig) -> Result<AttributeSchema> {
    if cfg.regions.len() < 2 {
        return Err(Error::Schema(format!("need at least 2 regions, got {}", cfg.regions.len())));
    }
    let palette: HashSet<&str> = cfg.palette.iter().map(|p| p.word.as_str()).collect();
    let regions: Vec<String> = cfg.regions.iter().map(|r| r.name.clone()).collect();
    if regions.iter().collect::<HashSet<_>>().len() != regions.len() {
        return Err(Error::Schema("duplicate region name".into()));
    }
    for acc in &cfg.accessories {
        if !regions.contains(&acc.region) {
            return Err(Error::Schema(format!("accessory {} names unknown region {}", acc.value, acc.region)));
        }
    }
    let mut attributes = Vec::new();
    for (ri, spec) in cfg.regions.iter().enumerate() {
        if spec.values.is_empty() {
            return Err(Error::Schema(format!("region {} has an empty value set", spec.name)));
        }
        if spec.values.len() < 2 {
            return Err(Error::Schema(format!("region {} needs at least 2 values", spec.name)));
        }
        for v in &spec.values {
            if !palette.contains(v.as_str()) {
                return Err(Error::Schema(format!("value word `{v}` has no palette colour")));
            }
            attributes.push(AttributeDef {
                id: attributes.len(),
                region: spec.name.clone(),
                region_idx: ri,
                category: spec.category.clone(),
                value: v.clone(),
                kind: AttrKind::Value,
            });
        }
        for acc in cfg.accessories.iter().filter(|a| a.region == spec.name) {
            attributes.push(AttributeDef {
                id: attributes.len(),
                region: spec.name.clone(),
                region_idx: ri,
                category: acc.category.clone(),
                value: acc.value.clone(),
                kind: AttrKind::Accessory,
            });
        }
    }
    for w in attributes.iter().flat_map(|a| [&a.region, &a.category, &a.value]) {
        if w.is_empty() || w.chars().any(char::is_whitespace) {
            return Err(Error::Schema(format!("attribute word `{w}` must be one non-empty token")));
        }
    }
    let schema = AttributeSchema { regions, attributes };
    schema.validate()?;
    Ok(schema)
}

/// Mark the last `holdout` value attributes (by id) of every region as unseen.
pub fn split_open_domain(schema: &AttributeSchema, holdout: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut unseen = Vec::new();
    for r in 0..schema.regions.len() {
        let values = schema.region_values(r);
        if holdout >= values.len() {
            return Err(Error::Schema(format!(
                "holdout {holdout} leaves region {} with no seen value attribute",
                schema.regions[r]
            )));
        }
        unseen.extend_from_slice(&values[values.len() - holdout..]);
    }
    unseen.sort_unstable();
    let seen = (0..schema.len()).filter(|i| unseen.binary_search(i).is_err()).collect();
    Ok((seen, unseen))
}

/// Seen/unseen split from an explicit unseen list. Every region must keep at
/// least one seen value attribute.
pub fn split_explicit(schema: &AttributeSchema, unseen: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut unseen = unseen.to_vec();
    unseen.sort_unstable();
    unseen.dedup();
    if let Some(&bad) = unseen.iter().find(|&&i| i >= schema.len()) {
        return Err(Error::Schema(format!("unseen attribute id {bad} is out of range")));
    }
    for r in 0..schema.regions.len() {
        if schema.region_values(r).iter().all(|i| unseen.binary_search(i).is_ok()) {
            return Err(Error::Schema(format!("region {} has no seen value attribute left", schema.regions[r])));
        }
    }
    let seen = (0..schema.len()).filter(|i| unseen.binary_search(i).is_err()).collect();
    Ok((seen, unseen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AccessorySpec, RegionSpec};

    fn cfg(regions: usize, values: usize, accessories: usize) -> DataConfig {
        let words = ["red", "green", "blue", "yellow", "white", "black"];
        let mut c = DataConfig::default();
        c.regions = (0..regions)
            .map(|r| RegionSpec {
                name: format!("r{r}"),
                category: "part".into(),
                values: (0..values).map(|v| words[(r + v) % words.len()].to_string()).collect(),
            })
            .collect();
        c.accessories = (0..accessories)
            .map(|a| AccessorySpec { region: format!("r{}", a % regions), category: "accessory".into(), value: format!("acc{a}") })
            .collect();
        c
    }

    #[test]
    fn counts() {
        assert_eq!(build_schema(&cfg(4, 3, 0)).unwrap().len(), 12);
        assert_eq!(build_schema(&cfg(4, 4, 2)).unwrap().len(), 18);
        assert_eq!(build_schema(&DataConfig::default()).unwrap().len(), 18);
    }

    #[test]
    fn deterministic() {
        assert_eq!(build_schema(&cfg(4, 4, 2)).unwrap(), build_schema(&cfg(4, 4, 2)).unwrap());
    }

    #[test]
    fn duplicate_value_in_region_is_rejected() {
        let mut c = cfg(2, 2, 0);
        c.regions[0].values = vec!["red".into(), "red".into()];
        assert!(matches!(build_schema(&c), Err(Error::Schema(_))));
    }

    #[test]
    fn empty_region_is_rejected() {
        let mut c = cfg(2, 2, 0);
        c.regions[1].values.clear();
        assert!(build_schema(&c).is_err());
        assert!(build_schema(&cfg(1, 3, 0)).is_err());
    }

    #[test]
    fn holdout_splits() {
        let s = build_schema(&cfg(4, 3, 0)).unwrap();
        let (seen, unseen) = split_open_domain(&s, 1).unwrap();
        assert_eq!((seen.len(), unseen.len()), (8, 4));
        assert_eq!(unseen, vec![2, 5, 8, 11]);
        let (seen, unseen) = split_open_domain(&s, 0).unwrap();
        assert_eq!(seen.len(), 12);
        assert!(unseen.is_empty());
        assert!(split_open_domain(&s, 3).is_err());
    }

    #[test]
    fn explicit_split_matches_holdout() {
        let s = build_schema(&cfg(4, 3, 0)).unwrap();
        assert_eq!(split_explicit(&s, &[11, 2, 8, 5, 2]).unwrap(), split_open_domain(&s, 1).unwrap());
        assert!(split_explicit(&s, &[0, 1, 2]).is_err());
        assert!(split_explicit(&s, &[12]).is_err());
    }

    #[test]
    fn default_holdout_words_stay_in_vocabulary() {
        let s = build_schema(&DataConfig::default()).unwrap();
        let (seen, unseen) = split_open_domain(&s, 1).unwrap();
        for u in unseen {
            let word = &s.attr(u).value;
            assert!(seen.iter().any(|&i| &s.attr(i).value == word), "{word} never seen");
        }
    }
}
