//! Built-in dataset facts: per-dataset semantic palettes, the merge arrows
//! down to the common class set, and the AFOV-unification table rows.

use crate::adapt::{AdaptError, MergeTable};
use crate::core::{CameraIntrinsics, ClassRegistry};

/// Datasets with built-in palettes / geometry rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetId {
    Viper,
    SynthiaSf,
    Synscapes,
    VirtualKitti,
    Kitti,
    Lyft,
    Presil,
}

impl DatasetId {
    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Viper => "viper",
            DatasetId::SynthiaSf => "synthia_sf",
            DatasetId::Synscapes => "synscapes",
            DatasetId::VirtualKitti => "virtual_kitti",
            DatasetId::Kitti => "kitti",
            DatasetId::Lyft => "lyft",
            DatasetId::Presil => "presil",
        }
    }
}

/// One row of the label-unification table: class name, its RGB code in each
/// dataset that has it, and the common-set class it merges into.
struct LabelRow {
    name: &'static str,
    viper: Option<[u8; 3]>,
    synthia: Option<[u8; 3]>,
    synscapes: Option<[u8; 3]>,
    vkitti: Option<[u8; 3]>,
    kitti: Option<[u8; 3]>,
    merged_into: &'static str,
}

macro_rules! row {
    ($name:literal, $v:expr, $s:expr, $sy:expr, $vk:expr, $k:expr, $to:literal) => {
        LabelRow {
            name: $name,
            viper: $v,
            synthia: $s,
            synscapes: $sy,
            vkitti: $vk,
            kitti: $k,
            merged_into: $to,
        }
    };
}

#[rustfmt::skip]
const LABEL_TABLE: &[LabelRow] = &[
    row!("Unlabeled",            Some([0,0,0]),       Some([0,0,0]),       Some([0,0,0]),       Some([0,0,0]),     Some([0,0,0]),       "Unlabeled"),
    row!("Fence",                Some([190,153,153]), Some([190,153,153]), Some([190,153,153]), None,              Some([190,153,153]), "Unlabeled"),
    row!("Guard Rail",           None,                None,                Some([180,165,180]), Some([250,100,255]), Some([180,165,180]), "Unlabeled"),
    row!("Wall",                 None,                Some([102,102,156]), Some([102,102,156]), None,              Some([102,102,156]), "Building"),
    row!("Parking",              None,                None,                Some([250,170,160]), None,              Some([250,170,160]), "Road"),
    row!("Rail Track",           Some([230,150,140]), None,                Some([230,150,140]), None,              Some([230,150,140]), "Road"),
    row!("Road",                 Some([128,64,128]),  Some([128,64,128]),  Some([128,64,128]),  Some([100,60,100]), Some([128,64,128]), "Road"),
    row!("Sidewalk",             Some([244,35,232]),  Some([244,35,232]),  Some([244,35,232]),  None,              Some([244,35,232]),  "Sidewalk"),
    row!("Bridge",               None,                None,                Some([150,100,100]), None,              Some([150,100,100]), "Building"),
    row!("Building",             Some([70,70,70]),    Some([70,70,70]),    Some([70,70,70]),    Some([140,140,140]), Some([70,70,70]),  "Building"),
    row!("Tunnel",               None,                None,                Some([150,120,90]),  None,              Some([150,120,90]),  "Building"),
    row!("Person",               Some([220,20,60]),   Some([220,20,60]),   Some([220,20,60]),   None,              Some([220,20,60]),   "Person"),
    row!("Bicyclist",            Some([255,0,0]),     Some([255,0,0]),     Some([255,0,0]),     None,              Some([255,0,0]),     "Person"),
    row!("Lane Marking - General", None,              Some([157,234,50]),  None,                None,              None,                "Road"),
    row!("Sky",                  Some([70,130,180]),  Some([70,130,180]),  Some([70,130,180]),  Some([90,200,255]), Some([70,130,180]), "Sky"),
    row!("Terrain",              Some([152,251,152]), Some([152,251,152]), Some([152,251,152]), Some([210,0,200]), Some([152,251,152]), "Terrain"),
    row!("Vegetation",           Some([35,142,35]),   Some([107,142,35]),  Some([107,142,35]),  Some([90,240,0]),  Some([107,142,35]),  "Vegetation"),
    row!("Pole",                 Some([153,153,153]), Some([153,153,153]), Some([153,153,153]), Some([255,130,0]), Some([153,153,153]), "Pole"),
    row!("Traffic Light",        Some([250,170,30]),  Some([250,170,30]),  Some([250,170,30]),  Some([200,200,0]), Some([250,170,30]),  "Pole"),
    row!("Traffic Sign",         Some([220,220,0]),   Some([220,220,0]),   Some([220,220,0]),   Some([255,255,0]), Some([220,220,0]),   "Pole"),
    row!("Trash Can",            Some([81,0,81]),     None,                None,                None,              None,                "Unlabeled"),
    row!("Bicycle",              Some([119,11,32]),   Some([119,11,32]),   Some([119,11,32]),   None,              Some([119,11,32]),   "Bicycle"),
    row!("Boat",                 Some([50,0,90]),     None,                None,                None,              None,                "Unlabeled"),
    row!("Bus",                  Some([0,60,100]),    Some([0,60,100]),    Some([0,60,100]),    None,              Some([0,60,100]),    "Car"),
    row!("Car",                  Some([0,0,142]),     Some([0,0,142]),     Some([0,0,142]),     Some([255,127,80]), Some([0,0,142]),    "Car"),
    row!("Caravan",              Some([0,0,90]),      None,                Some([0,0,90]),      None,              Some([0,0,90]),      "Car"),
    row!("Motorcycle",           Some([0,0,230]),     Some([0,0,230]),     Some([0,0,230]),     None,              Some([0,0,230]),     "Bicycle"),
    row!("On Rails",             Some([0,80,100]),    Some([0,80,100]),    Some([0,80,100]),    None,              Some([0,80,100]),    "Car"),
    row!("Trailer",              None,                None,                Some([0,0,110]),     None,              Some([0,0,110]),     "Car"),
    row!("Truck",                Some([0,0,70]),      Some([0,0,70]),      Some([0,0,70]),      Some([160,60,60]), Some([0,0,70]),      "Car"),
    row!("ground",               None,                None,                Some([81,0,81]),     None,              Some([81,0,81]),     "Unlabeled"),
    row!("dynamic",              Some([111,74,0]),    None,                Some([111,74,0]),    None,              Some([111,74,0]),    "Unlabeled"),
    row!("plane",                Some([0,100,100]),   None,                None,                None,              None,                "Unlabeled"),
    row!("trash",                Some([81,0,21]),     None,                None,                None,              None,                "Unlabeled"),
    row!("chair",                Some([168,153,153]), None,                None,                None,              None,                "Unlabeled"),
    row!("firehydrant",          Some([173,153,153]), None,                None,                None,              None,                "Unlabeled"),
    row!("mobilebarrier",        Some([180,180,100]), None,                None,                None,              None,                "Unlabeled"),
    row!("billboard",            Some([150,20,20]),   None,                None,                None,              None,                "Unlabeled"),
    row!("tree",                 Some([87,182,35]),   None,                None,                Some([0,199,0]),   None,                "Unlabeled"),
    row!("Misc",                 None,                None,                None,                Some([80,80,80]),  None,                "Unlabeled"),
];

/// The unified class set every dataset merges into: 11 classes, Unlabeled
/// first.
pub fn common_registry() -> ClassRegistry {
    let entries = vec![
        ("Unlabeled".to_string(), [0u8, 0, 0]),
        ("Road".to_string(), [128, 64, 128]),
        ("Sidewalk".to_string(), [244, 35, 232]),
        ("Building".to_string(), [70, 70, 70]),
        ("Person".to_string(), [220, 20, 60]),
        ("Sky".to_string(), [70, 130, 180]),
        ("Terrain".to_string(), [152, 251, 152]),
        ("Vegetation".to_string(), [107, 142, 35]),
        ("Pole".to_string(), [153, 153, 153]),
        ("Bicycle".to_string(), [119, 11, 32]),
        ("Car".to_string(), [0, 0, 142]),
    ];
    ClassRegistry::new("common", entries).expect("static table is well-formed")
}

fn column(row: &LabelRow, id: DatasetId) -> Option<[u8; 3]> {
    match id {
        DatasetId::Viper => row.viper,
        DatasetId::SynthiaSf => row.synthia,
        DatasetId::Synscapes => row.synscapes,
        DatasetId::VirtualKitti => row.vkitti,
        DatasetId::Kitti => row.kitti,
        // No published palette for these two; they carry no semantic labels.
        DatasetId::Lyft | DatasetId::Presil => None,
    }
}

/// Source palette of one dataset (classes present in its column).
pub fn source_registry(id: DatasetId) -> Result<ClassRegistry, AdaptError> {
    let mut entries = Vec::new();
    for row in LABEL_TABLE {
        if let Some(rgb) = column(row, id) {
            entries.push((row.name.to_string(), rgb));
        }
    }
    if entries.len() <= 1 {
        return Err(AdaptError::UnknownRegistry(format!(
            "dataset {} has no semantic palette",
            id.name()
        )));
    }
    ClassRegistry::new(id.name(), entries).map_err(AdaptError::Core)
}

/// Merge table from a dataset's palette down to the common set. Classes
/// without a higher category merge into `Unlabeled`.
pub fn merge_to_common(id: DatasetId) -> Result<MergeTable, AdaptError> {
    let source = source_registry(id)?;
    let mapping = LABEL_TABLE
        .iter()
        .filter(|row| column(row, id).is_some())
        .map(|row| (row.name.to_string(), row.merged_into.to_string()))
        .collect::<Vec<_>>();
    MergeTable::new(source, common_registry(), &mapping)
}

/// Registry lookup by manifest name ("common" or a dataset name).
pub fn registry_by_name(name: &str) -> Result<ClassRegistry, AdaptError> {
    match name {
        "common" => Ok(common_registry()),
        "viper" => source_registry(DatasetId::Viper),
        "synthia_sf" => source_registry(DatasetId::SynthiaSf),
        "synscapes" => source_registry(DatasetId::Synscapes),
        "virtual_kitti" => source_registry(DatasetId::VirtualKitti),
        "kitti" => source_registry(DatasetId::Kitti),
        other => Err(AdaptError::UnknownRegistry(other.to_string())),
    }
}

/// One row of the AFOV-unification table.
#[derive(Debug, Clone)]
pub struct AfovRow {
    pub dataset: DatasetId,
    pub intrinsics: CameraIntrinsics,
    /// Crop consistent with the published final AFOV. For sources narrower
    /// than the reference this equals the original size (clamp path).
    pub published_crop: (usize, usize),
    pub published_afov_deg: (f64, f64),
    pub clamped: bool,
}

/// The AFOV-unification rows. All samples reduce to the Lyft Level 5
/// reference AFOV. The KITTI focal length carries the full calibration
/// precision (prints as 721.5 at table precision).
pub fn afov_table() -> Vec<AfovRow> {
    let row = |dataset, f, w, h, cw, ch, ah, av, clamped| AfovRow {
        dataset,
        intrinsics: CameraIntrinsics::new(f, w as f64, h as f64).expect("static table"),
        published_crop: (cw, ch),
        published_afov_deg: (ah, av),
        clamped,
    };
    vec![
        row(DatasetId::Lyft, 880.0, 1224, 1024, 1216, 352, 69.28, 22.62, false),
        row(DatasetId::Presil, 960.0, 1920, 1080, 1328, 384, 69.34, 22.62, false),
        row(DatasetId::Synscapes, 1590.0, 1440, 416, 1440, 416, 48.72, 14.91, true),
        row(DatasetId::SynthiaSf, 847.6, 1920, 1080, 1172, 340, 69.32, 22.68, false),
        row(DatasetId::VirtualKitti, 725.0, 1242, 375, 1002, 290, 69.29, 22.62, false),
        row(DatasetId::Viper, 1158.0, 1920, 1080, 1602, 464, 69.34, 22.66, false),
        row(DatasetId::Kitti, 721.5377, 1242, 375, 998, 289, 69.3, 22.6, false),
    ]
}

/// Reference target AFOV in degrees (the Lyft Level 5 row after cropping).
pub fn lyft_reference_afov_deg() -> (f64, f64) {
    (69.28, 22.62)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_source_registry_is_well_formed() {
        for id in [
            DatasetId::Viper,
            DatasetId::SynthiaSf,
            DatasetId::Synscapes,
            DatasetId::VirtualKitti,
            DatasetId::Kitti,
        ] {
            let reg = source_registry(id).unwrap();
            assert!(reg.len() > 1, "{:?}", id);
            assert_eq!(reg.class_name(0), "Unlabeled");
        }
    }

    #[test]
    fn synthia_column_matches_table() {
        // 20 labeled classes plus Unlabeled in the unification table.
        let reg = source_registry(DatasetId::SynthiaSf).unwrap();
        assert_eq!(reg.len(), 21);
        assert_eq!(reg.index_of_rgb([157, 234, 50]), reg.index_of("Lane Marking - General"));
    }

    #[test]
    fn common_set_has_eleven_classes() {
        assert_eq!(common_registry().len(), 11);
        assert_eq!(common_registry().index_of_rgb([128, 64, 128]), Some(1)); // Road
    }

    #[test]
    fn merge_tables_cover_every_source_class() {
        for id in [DatasetId::Viper, DatasetId::Kitti, DatasetId::Synscapes] {
            let table = merge_to_common(id).unwrap();
            assert_eq!(table.source().len(), source_registry(id).unwrap().len());
        }
    }

    #[test]
    fn wall_merges_into_building() {
        let table = merge_to_common(DatasetId::Kitti).unwrap();
        let wall = table.source().index_of("Wall").unwrap();
        let building = table.target().index_of("Building").unwrap();
        assert_eq!(table.target_index(wall), building);
    }
}
