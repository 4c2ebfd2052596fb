//! The 19-class driving-scene taxonomy and raw-label remapping.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ClassId;

pub const NUM_CLASSES: usize = 19;

/// Class names indexed by `id - 1`.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
];

/// Default incremental order and report column order:
/// road, parking, sidewalk, other-ground, vegetation, terrain, building,
/// fence, trunk, pole, traffic-sign, bicycle, motorcycle, truck,
/// other-vehicle, person, bicyclist, motorcyclist, car.
pub const TABLE_ORDER: [ClassId; NUM_CLASSES] = [9, 10, 11, 12, 15, 17, 13, 14, 16, 18, 19, 2, 3, 4, 5, 6, 7, 8, 1];

pub fn class_name(id: ClassId) -> Option<&'static str> {
    (id as usize).checked_sub(1).and_then(|i| CLASS_NAMES.get(i)).copied()
}

/// Raw dataset label id to taxonomy id. Unmapped ids become 0 (ignore).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    table: BTreeMap<u32, ClassId>,
}

impl LabelMap {
    pub fn identity(max_class: ClassId) -> Self {
        LabelMap {
            table: (1..=max_class).map(|c| (c as u32, c)).collect(),
        }
    }

    /// Raw SemanticKITTI semantic ids, moving classes folded onto static ones.
    pub fn semantic_kitti() -> Self {
        let pairs: [(u32, ClassId); 34] = [
            (0, 0),
            (1, 0),
            (10, 1),
            (11, 2),
            (13, 5),
            (15, 3),
            (16, 5),
            (18, 4),
            (20, 5),
            (30, 6),
            (31, 7),
            (32, 8),
            (40, 9),
            (44, 10),
            (48, 11),
            (49, 12),
            (50, 13),
            (51, 14),
            (52, 0),
            (60, 9),
            (70, 15),
            (71, 16),
            (72, 17),
            (80, 18),
            (81, 19),
            (99, 0),
            (252, 1),
            (253, 7),
            (254, 6),
            (255, 8),
            (256, 5),
            (257, 5),
            (258, 4),
            (259, 5),
        ];
        LabelMap {
            table: pairs.into_iter().collect(),
        }
    }

    /// Parses `raw mapped` pairs, one per line, separated by whitespace,
    /// `:` or `,`. `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = BTreeMap::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let content = line.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                let fields: Vec<&str> = content
                    .split(|c: char| c.is_whitespace() || c == ':' || c == ',')
                    .filter(|s| !s.is_empty())
                    .collect();
                let bad = |message: String| Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    message,
                };
                let [raw, mapped] = fields.as_slice() else {
                    return Err(bad(format!("expected two fields, got {content:?}")));
                };
                let raw: u32 = raw.parse().map_err(|_| bad(format!("bad raw id {raw:?}")))?;
                let mapped: ClassId = mapped.parse().map_err(|_| bad(format!("bad class id {mapped:?}")))?;
                table.insert(raw, mapped);
            }
            offset += line.len() as u64 + 1;
        }
        Ok(LabelMap { table })
    }

    pub fn map(&self, raw: u32) -> ClassId {
        self.table.get(&raw).copied().unwrap_or(0)
    }

    pub fn max_class(&self) -> ClassId {
        self.table.values().copied().max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_order_is_a_permutation() {
        let mut ids = TABLE_ORDER.to_vec();
        ids.sort_unstable();
        assert_eq!(ids, (1..=19).collect::<Vec<ClassId>>());
        assert_eq!(class_name(TABLE_ORDER[0]), Some("road"));
        assert_eq!(class_name(TABLE_ORDER[18]), Some("car"));
        assert_eq!(class_name(0), None);
    }

    #[test]
    fn kitti_map_folds_moving_classes() {
        let m = LabelMap::semantic_kitti();
        assert_eq!(m.map(252), m.map(10));
        assert_eq!(m.map(60), m.map(40));
        assert_eq!(m.map(12345), 0);
        assert_eq!(m.max_class(), 19);
    }

    #[test]
    fn map_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.txt");
        std::fs::write(&p, "# raw: class\n10: 1\n40 9\n").unwrap();
        let m = LabelMap::from_file(&p).unwrap();
        assert_eq!((m.map(10), m.map(40), m.map(41)), (1, 9, 0));
        std::fs::write(&p, "10\n").unwrap();
        assert!(LabelMap::from_file(&p).is_err());
    }
}
