use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{LabelMask, IGNORE};
use crate::{CoreSegError, Result};

/// Leave-one-class-out scenario: which original classes are hidden from
/// training and how the rest are renumbered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocoSpec {
    pub all_classes: Vec<String>,
    /// Original ids treated as unknown.
    pub held_out: BTreeSet<usize>,
    /// Original id -> training id; `None` means unknown.
    pub remap: Vec<Option<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LocoFile {
    classes: Vec<String>,
    held_out: Vec<String>,
}

impl LocoSpec {
    /// Builds the remap from class names; held-out names must exist.
    pub fn new(all_classes: Vec<String>, held_out: &[String]) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for name in held_out {
            let id = all_classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| CoreSegError::Config(format!("held-out class `{name}` not in class list")))?;
            ids.insert(id);
        }
        Self::from_ids(all_classes, ids)
    }

    pub fn from_ids(all_classes: Vec<String>, held_out: BTreeSet<usize>) -> Result<Self> {
        if let Some(&bad) = held_out.iter().find(|&&i| i >= all_classes.len()) {
            return Err(CoreSegError::Config(format!("held-out id {bad} out of range")));
        }
        let mut next = 0;
        let remap = (0..all_classes.len())
            .map(|i| {
                if held_out.contains(&i) {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        if next == 0 {
            return Err(CoreSegError::Config("every class is held out".into()));
        }
        Ok(LocoSpec {
            all_classes,
            held_out,
            remap,
        })
    }

    /// Parses the text form:
    ///
    /// ```toml
    /// classes = ["impervious", "building", "low_veg", "tree", "car", "clutter"]
    /// held_out = ["building"]
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let file: LocoFile = toml::from_str(text).map_err(|e| CoreSegError::Config(e.to_string()))?;
        Self::new(file.classes, &file.held_out)
    }

    /// Number of known (training) classes.
    pub fn num_known(&self) -> usize {
        self.remap.iter().filter(|r| r.is_some()).count()
    }

    /// Training id -> original id.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.num_known()];
        for (orig, r) in self.remap.iter().enumerate() {
            if let Some(t) = r {
                inv[*t] = orig;
            }
        }
        inv
    }

    /// Names of the known classes in training-id order.
    pub fn known_names(&self) -> Vec<String> {
        self.inverse()
            .into_iter()
            .map(|i| self.all_classes[i].clone())
            .collect()
    }

    pub fn held_out_names(&self) -> Vec<String> {
        self.held_out
            .iter()
            .map(|&i| self.all_classes[i].clone())
            .collect()
    }
}

/// Renumbers an original-id mask for a LOCO scenario: held-out classes become
/// UNKNOWN (= K), known classes are densely renumbered, IGNORE is preserved.
pub fn apply_loco(mask: &LabelMask, spec: &LocoSpec) -> Result<LabelMask> {
    let k = spec.num_known() as i32;
    let mut out = mask.labels.clone();
    for v in out.iter_mut() {
        if *v == IGNORE {
            continue;
        }
        let mapped = usize::try_from(*v)
            .ok()
            .and_then(|i| spec.remap.get(i))
            .ok_or(CoreSegError::UnknownLabel(*v))?;
        *v = match mapped {
            Some(t) => *t as i32,
            None => k,
        };
    }
    Ok(LabelMask {
        labels: out,
        num_known: spec.num_known(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn dense_renumbering_with_middle_class_held_out() {
        let spec = LocoSpec::from_ids(names(3), [1].into()).unwrap();
        let mask = LabelMask::new(Array2::from_shape_vec((1, 3), vec![0, 1, 2]).unwrap(), 3).unwrap();
        let out = apply_loco(&mask, &spec).unwrap();
        assert_eq!(out.num_known, 2);
        assert_eq!(out.labels.as_slice().unwrap(), &[0, 2, 1]);
        assert_eq!(out.unknown(), 2);
    }

    #[test]
    fn all_ignore_stays_ignore() {
        let spec = LocoSpec::from_ids(names(3), [0].into()).unwrap();
        let mask = LabelMask::new(Array2::from_elem((2, 2), IGNORE), 3).unwrap();
        let out = apply_loco(&mask, &spec).unwrap();
        assert!(out.labels.iter().all(|&l| l == IGNORE));
    }

    #[test]
    fn six_class_building_scenario_has_five_known() {
        let classes: Vec<String> = ["impervious", "building", "low_veg", "tree", "car", "clutter"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let spec = LocoSpec::new(classes, &["building".to_string()]).unwrap();
        assert_eq!(spec.num_known(), 5);
        assert_eq!(spec.held_out_names(), vec!["building"]);
    }

    #[test]
    fn label_outside_domain_is_named() {
        let spec = LocoSpec::from_ids(names(2), [0].into()).unwrap();
        let mask = LabelMask {
            labels: Array2::from_shape_vec((1, 2), vec![0, 7]).unwrap(),
            num_known: 9,
        };
        match apply_loco(&mask, &spec) {
            Err(CoreSegError::UnknownLabel(7)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_text_form() {
        let spec = LocoSpec::parse("classes = [\"a\", \"b\", \"c\"]\nheld_out = [\"c\"]\n").unwrap();
        assert_eq!(spec.remap, vec![Some(0), Some(1), None]);
        assert!(LocoSpec::parse("classes = [\"a\"]\nheld_out = [\"z\"]\n").is_err());
    }

    proptest! {
        #[test]
        fn remap_then_inverse_is_identity_on_known(
            n in 2usize..8,
            held in 0usize..8,
            labels in proptest::collection::vec(-1i32..8, 1..64),
        ) {
            let held = held % n;
            let spec = LocoSpec::from_ids(names(n), [held].into()).unwrap();
            let labels: Vec<i32> = labels.into_iter().map(|l| if l < 0 { l } else { l % n as i32 }).collect();
            let mask = LabelMask::new(Array2::from_shape_vec((1, labels.len()), labels.clone()).unwrap(), n).unwrap();
            let out = apply_loco(&mask, &spec).unwrap();
            let inv = spec.inverse();
            let k = spec.num_known() as i32;
            for (orig, new) in labels.iter().zip(out.labels.iter()) {
                if *orig == IGNORE {
                    prop_assert_eq!(*new, IGNORE);
                } else if *orig as usize == held {
                    prop_assert_eq!(*new, k);
                } else {
                    prop_assert!(*new >= 0 && *new < k);
                    prop_assert_eq!(inv[*new as usize] as i32, *orig);
                }
            }
        }
    }
}
