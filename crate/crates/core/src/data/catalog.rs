use serde::{Deserialize, Serialize};

/// Ordered class names; the label of a class is its position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub names: Vec<String>,
    /// Known full-dataset counts, when the catalog describes a published set.
    pub expected_counts: Option<Vec<usize>>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            expected_counts: None,
        }
    }

    /// The seven cooking states in alphabetical order with their counts in
    /// the challenge dataset.
    pub fn cooking_states() -> Self {
        let names = [
            "creamy_paste",
            "diced",
            "grated",
            "juiced",
            "jullienne",
            "sliced",
            "whole",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            expected_counts: Some(vec![730, 700, 819, 638, 672, 1315, 1304]),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn expected_total(&self) -> Option<usize> {
        self.expected_counts.as_ref().map(|c| c.iter().sum())
    }
}
