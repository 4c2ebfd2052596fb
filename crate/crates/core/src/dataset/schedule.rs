use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ClassId;

/// Named split of the class set into incremental steps.
///
/// `k1-k2` shows `k1` classes at step 0 and then `k2` per step until every
/// class is covered; three or more sizes (`6-5-8`) are taken literally.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Preset {
    Offline,
    Sizes(Vec<usize>),
}

impl Preset {
    /// The five splits used for the 19-class benchmark.
    pub const BENCHMARK: [&'static str; 5] = ["offline", "11-8", "6-5-8", "11-1", "6-1"];

    pub fn step_sizes(&self, total: usize) -> Result<Vec<usize>> {
        let sizes = match self {
            Preset::Offline => vec![total],
            Preset::Sizes(s) if s.len() == 2 => {
                let (first, rest) = (s[0], s[1]);
                if rest == 0 || first > total || !(total - first).is_multiple_of(rest) {
                    return Err(Error::InvalidArgument(format!(
                        "preset {self} does not tile {total} classes"
                    )));
                }
                let mut v = vec![first];
                v.extend(std::iter::repeat_n(rest, (total - first) / rest));
                v
            }
            Preset::Sizes(s) => s.clone(),
        };
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("preset {self} has an empty step")));
        }
        let sum: usize = sizes.iter().sum();
        if sum != total {
            return Err(Error::InvalidArgument(format!(
                "preset {self} step sizes sum to {sum}, expected {total}"
            )));
        }
        Ok(sizes)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("offline") {
            return Ok(Preset::Offline);
        }
        let sizes = s
            .split('-')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::InvalidArgument(format!("unknown preset {s:?}")))?;
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!("unknown preset {s:?}")));
        }
        Ok(Preset::Sizes(sizes))
    }
}

impl TryFrom<String> for Preset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Preset> for String {
    fn from(p: Preset) -> String {
        p.to_string()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Offline => f.write_str("offline"),
            Preset::Sizes(s) => {
                let parts: Vec<String> = s.iter().map(usize::to_string).collect();
                f.write_str(&parts.join("-"))
            }
        }
    }
}

/// Ordered partition of `{1..=total_classes}` into incremental steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSchedule {
    total_classes: usize,
    steps: Vec<Vec<ClassId>>,
}

impl ClassSchedule {
    pub fn new(total_classes: usize, steps: Vec<Vec<ClassId>>) -> Result<Self> {
        if total_classes == 0 || steps.is_empty() {
            return Err(Error::InvalidArgument(
                "schedule needs at least one class and one step".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for step in &steps {
            if step.is_empty() {
                return Err(Error::InvalidArgument("schedule step without classes".into()));
            }
            for &c in step {
                if c == 0 || c as usize > total_classes {
                    return Err(Error::InvalidArgument(format!("class {c} outside 1..={total_classes}")));
                }
                if !seen.insert(c) {
                    return Err(Error::InvalidArgument(format!("class {c} appears in two steps")));
                }
            }
        }
        if seen.len() != total_classes {
            return Err(Error::InvalidArgument(format!(
                "schedule covers {} of {total_classes} classes",
                seen.len()
            )));
        }
        Ok(ClassSchedule { total_classes, steps })
    }

    /// Reads a split file: one step per line, comma-separated class ids.
    /// Blank lines and `#` comments are skipped.
    pub fn from_split_file(path: &Path, total_classes: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut steps = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let content = line.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                let step = content
                    .split(',')
                    .map(|t| t.trim().parse::<ClassId>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        offset,
                        message: format!("bad class id: {e}"),
                    })?;
                steps.push(step);
            }
            offset += line.len() as u64 + 1;
        }
        Self::new(total_classes, steps)
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[Vec<ClassId>] {
        &self.steps
    }

    pub fn step(&self, k: usize) -> &[ClassId] {
        &self.steps[k]
    }

    /// Classes seen up to and including step `k`, in schedule order.
    pub fn seen_through(&self, k: usize) -> Vec<ClassId> {
        self.steps[..=k].iter().flatten().copied().collect()
    }

    pub fn step_sizes(&self) -> Vec<usize> {
        self.steps.iter().map(Vec::len).collect()
    }
}

/// Splits `class_order` into steps sized per `preset`.
pub fn build_schedule(preset: &Preset, total_classes: usize, class_order: &[ClassId]) -> Result<ClassSchedule> {
    if class_order.len() != total_classes {
        return Err(Error::InvalidArgument(format!(
            "class order has {} entries, expected {total_classes}",
            class_order.len()
        )));
    }
    let sizes = preset.step_sizes(total_classes)?;
    let mut steps = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for s in sizes {
        steps.push(class_order[at..at + s].to_vec());
        at += s;
    }
    ClassSchedule::new(total_classes, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::taxonomy::TABLE_ORDER;

    fn sizes(name: &str) -> Vec<usize> {
        build_schedule(&name.parse().unwrap(), 19, &TABLE_ORDER)
            .unwrap()
            .step_sizes()
    }

    #[test]
    fn benchmark_presets() {
        assert_eq!(sizes("offline"), vec![19]);
        assert_eq!(sizes("11-8"), vec![11, 8]);
        assert_eq!(sizes("6-5-8"), vec![6, 5, 8]);
        assert_eq!(sizes("11-1"), [vec![11], vec![1; 8]].concat());
        assert_eq!(sizes("6-1"), [vec![6], vec![1; 13]].concat());
    }

    #[test]
    fn preset_round_trips_through_display() {
        for name in Preset::BENCHMARK {
            assert_eq!(name.parse::<Preset>().unwrap().to_string(), name);
        }
        assert!("banana".parse::<Preset>().is_err());
        assert!("7".parse::<Preset>().is_err());
    }

    #[test]
    fn rejects_sizes_that_do_not_sum() {
        let order: Vec<ClassId> = (1..=4).collect();
        assert!(build_schedule(&"2-1-2".parse().unwrap(), 4, &order).is_err());
        assert!(build_schedule(&"3-2".parse().unwrap(), 4, &order).is_err());
        assert!(build_schedule(&"2-1".parse().unwrap(), 4, &order[..3]).is_err());
        assert_eq!(
            build_schedule(&"2-1".parse().unwrap(), 4, &order).unwrap().steps(),
            &[vec![1, 2], vec![3], vec![4]]
        );
    }

    #[test]
    fn rejects_overlapping_or_missing_classes() {
        assert!(ClassSchedule::new(3, vec![vec![1, 2], vec![2, 3]]).is_err());
        assert!(ClassSchedule::new(3, vec![vec![1, 2]]).is_err());
        assert!(ClassSchedule::new(3, vec![vec![0, 1, 2, 3]]).is_err());
    }

    #[test]
    fn split_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.txt");
        std::fs::write(&p, "# base\n3, 1\n\n2\n4\n").unwrap();
        let s = ClassSchedule::from_split_file(&p, 4).unwrap();
        assert_eq!(s.steps(), &[vec![3, 1], vec![2], vec![4]]);
        assert_eq!(s.seen_through(1), vec![3, 1, 2]);
        std::fs::write(&p, "1,x\n").unwrap();
        assert!(matches!(
            ClassSchedule::from_split_file(&p, 4),
            Err(Error::Format { .. })
        ));
    }
}
