//! Market-1501 file naming (`0002_c1s1_000451_03.jpg`) and directory layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_DIR,
            Split::Query => QUERY_DIR,
            Split::Gallery => GALLERY_DIR,
        }
    }
}

/// Fields of a parsed Market-1501 file name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarketName {
    pub person_id: i32,
    pub camera_id: u32,
    pub sequence: u32,
    pub frame: u32,
    pub index: u32,
    pub extension: String,
}

impl MarketName {
    /// Detector false positives, labeled `-1`.
    pub fn is_junk(&self) -> bool {
        self.person_id == -1
    }

    /// Background distractors, labeled `0`.
    pub fn is_distractor(&self) -> bool {
        self.person_id == 0
    }
}

fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(-1|\d{4})_c(\d)s(\d)_(\d+)_(\d+)\.(jpg|jpeg|png)$").expect("valid regex")
    })
}

pub fn parse_market_filename(name: &str) -> Result<MarketName> {
    let caps = pattern()
        .captures(name)
        .ok_or_else(|| Error::Parse(name.to_string()))?;
    let num = |i: usize| caps[i].parse::<u32>().map_err(|_| Error::Parse(name.to_string()));
    Ok(MarketName {
        person_id: caps[1].parse().map_err(|_| Error::Parse(name.to_string()))?,
        camera_id: num(2)?,
        sequence: num(3)?,
        frame: num(4)?,
        index: num(5)?,
        extension: caps[6].to_string(),
    })
}

pub fn format_market_filename(n: &MarketName) -> String {
    let pid = if n.person_id < 0 {
        n.person_id.to_string()
    } else {
        format!("{:04}", n.person_id)
    };
    format!(
        "{pid}_c{}s{}_{:06}_{:02}.{}",
        n.camera_id, n.sequence, n.frame, n.index, n.extension
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub person_id: i32,
    pub camera_id: u32,
    pub split: Split,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Lists one split directory in file-name order. Non-image files are ignored,
/// junk images are dropped everywhere and distractors are dropped from the
/// training split.
pub fn scan_split(root: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    let dir = root.join(split.dir_name());
    let mut paths = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(&dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.retain(|p| p.is_file() && has_image_extension(p));
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
        let name = parse_market_filename(file)?;
        if name.is_junk() || (split == Split::Train && name.is_distractor()) {
            continue;
        }
        out.push(ImageRecord {
            person_id: name.person_id,
            camera_id: name.camera_id,
            path,
            split,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_examples() {
        let n = parse_market_filename("0002_c1s1_000451_03.jpg").unwrap();
        assert_eq!((n.person_id, n.camera_id), (2, 1));
        assert!(!n.is_junk());
        let junk = parse_market_filename("-1_c3s2_000100_00.jpg").unwrap();
        assert!(junk.is_junk());
        assert!(parse_market_filename("0000_c6s4_002452_02.jpg").unwrap().is_distractor());
        assert!(matches!(
            parse_market_filename("notanimage.txt"),
            Err(Error::Parse(n)) if n == "notanimage.txt"
        ));
        assert!(parse_market_filename("0002_c1s1_000451_03.bmp").is_err());
    }

    #[test]
    fn scan_filters_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join(TRAIN_DIR);
        fs::create_dir(&train).unwrap();
        for f in [
            "0007_c2s1_000010_00.png",
            "0003_c1s1_000001_00.png",
            "-1_c1s1_000001_00.png",
            "0000_c1s1_000001_00.png",
            "Thumbs.db",
        ] {
            fs::write(train.join(f), b"").unwrap();
        }
        let recs = scan_split(dir.path(), Split::Train).unwrap();
        let pids: Vec<i32> = recs.iter().map(|r| r.person_id).collect();
        assert_eq!(pids, vec![3, 7]);
        fs::write(train.join("broken_name.jpg"), b"").unwrap();
        assert!(matches!(scan_split(dir.path(), Split::Train), Err(Error::Parse(_))));
        assert!(matches!(scan_split(dir.path(), Split::Query), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn filename_round_trip(
            pid in prop_oneof![Just(-1i32), 0i32..10000],
            cam in 1u32..10,
            seq in 1u32..10,
            frame in 0u32..1_000_000,
            index in 0u32..100,
            ext in prop_oneof![Just("jpg"), Just("jpeg"), Just("png")],
        ) {
            let n = MarketName { person_id: pid, camera_id: cam, sequence: seq, frame, index, extension: ext.to_string() };
            let s = format_market_filename(&n);
            prop_assert_eq!(parse_market_filename(&s).unwrap(), n);
        }
    }
}
