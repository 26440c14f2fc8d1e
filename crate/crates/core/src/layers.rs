//! Grouping parameter names into layers.
//!
//! Layer membership depends on the architecture's naming scheme, so the rule
//! is a configurable name-prefix: a group is the parameter name with its last
//! `n` dot-separated components removed. With the default `n = 1`, the toy
//! encoder names `layer0.weight` and `layer0.bias` both land in group
//! `layer0`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::WeightMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGrouping {
    /// Trailing dot-separated components stripped to form the group name.
    pub components_stripped: usize,
}

impl Default for LayerGrouping {
    fn default() -> Self {
        LayerGrouping {
            components_stripped: 1,
        }
    }
}

impl LayerGrouping {
    pub fn new(components_stripped: usize) -> Self {
        LayerGrouping {
            components_stripped,
        }
    }

    /// The group a parameter name belongs to. Names with too few components
    /// form their own group.
    pub fn group_of<'a>(&self, name: &'a str) -> &'a str {
        let mut end = name.len();
        for _ in 0..self.components_stripped {
            match name[..end].rfind('.') {
                Some(pos) if pos > 0 => end = pos,
                _ => return name,
            }
        }
        &name[..end]
    }

    /// Group names in lexicographic order, each mapped to the parameter names
    /// it contains (also sorted). Errors when the map has no parameters.
    pub fn groups(&self, map: &WeightMap) -> Result<BTreeMap<String, Vec<String>>> {
        if map.is_empty() {
            return Err(Error::InvalidInput(
                "layer grouping matched no parameters".to_string(),
            ));
        }
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (name, _) in map.iter() {
            groups
                .entry(self.group_of(name).to_string())
                .or_default()
                .push(name.clone());
        }
        Ok(groups)
    }

    /// Just the sorted group names.
    pub fn group_names(&self, map: &WeightMap) -> Result<Vec<String>> {
        Ok(self.groups(map)?.into_keys().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn strips_last_component() {
        let g = LayerGrouping::default();
        assert_eq!(g.group_of("layer0.weight"), "layer0");
        assert_eq!(g.group_of("layer0.bias"), "layer0");
        assert_eq!(g.group_of("plain"), "plain");
    }

    #[test]
    fn strips_two_components() {
        let g = LayerGrouping::new(2);
        assert_eq!(g.group_of("block.0.attn.weight"), "block.0");
        assert_eq!(g.group_of("a.b"), "a.b"); // too few components
    }

    #[test]
    fn groups_cover_all_parameters() {
        let mut m = WeightMap::new();
        for name in ["layer0.bias", "layer0.weight", "layer1.weight"] {
            m.insert(name, Tensor::new(vec![1], vec![0.0]).unwrap())
                .unwrap();
        }
        let groups = LayerGrouping::default().groups(&m).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups["layer0"], vec!["layer0.bias", "layer0.weight"]);
        assert_eq!(groups["layer1"], vec!["layer1.weight"]);
    }

    #[test]
    fn empty_map_is_an_error() {
        assert!(LayerGrouping::default().groups(&WeightMap::new()).is_err());
    }
}
