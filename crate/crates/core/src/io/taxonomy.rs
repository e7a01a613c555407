use std::fmt::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ClassId, ClassTaxonomy};

/// Parses a taxonomy file. Lines are `ignore <id>`,
/// `class <name> <thing|stuff> <raw id>` in training-id order, and
/// `map <raw id> <class name|ignore>`; `#` starts a comment.
pub fn parse_taxonomy(text: &str) -> Result<ClassTaxonomy> {
    let mut ignore: Option<ClassId> = None;
    let mut classes = Vec::new();
    let mut maps: Vec<(usize, u16, String)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line_no = no + 1;
        let err = |msg: String| Error::Config { line: line_no, msg };
        let words: Vec<&str> = line.split('#').next().unwrap_or("").split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["ignore", id] => {
                ignore = Some(id.parse().map_err(|_| err(format!("bad ignore id {id}")))?);
            }
            ["class", name, kind, raw] => {
                let thing = match *kind {
                    "thing" => true,
                    "stuff" => false,
                    other => return Err(err(format!("class kind must be thing or stuff, got {other}"))),
                };
                let raw: u16 = raw.parse().map_err(|_| err(format!("bad raw id {raw}")))?;
                classes.push((name.to_string(), thing, raw));
            }
            ["map", raw, target] => {
                let raw: u16 = raw.parse().map_err(|_| err(format!("bad raw id {raw}")))?;
                maps.push((line_no, raw, target.to_string()));
            }
            _ => return Err(err(format!("cannot parse {:?}", line.trim()))),
        }
    }
    let ignore = ignore.ok_or(Error::Config {
        line: 0,
        msg: "taxonomy lacks an ignore line".into(),
    })?;
    let mut raw_map = Vec::with_capacity(maps.len());
    for (line, raw, target) in maps {
        let class = if target == "ignore" {
            ignore
        } else {
            classes
                .iter()
                .position(|(n, _, _)| *n == target)
                .ok_or_else(|| Error::Config {
                    line,
                    msg: format!("map target {target} is not a class"),
                })? as ClassId
        };
        raw_map.push((raw, class));
    }
    ClassTaxonomy::new(classes, ignore, raw_map)
}

pub fn read_taxonomy(path: &Path) -> Result<ClassTaxonomy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_taxonomy(&text)
}

pub fn taxonomy_to_text(taxonomy: &ClassTaxonomy) -> String {
    let mut out = format!("ignore {}\n", taxonomy.ignore_id());
    let k = taxonomy.num_classes() as ClassId;
    for c in 0..k {
        let _ = writeln!(
            out,
            "class {} {} {}",
            taxonomy.name(c).unwrap_or_default(),
            if taxonomy.is_thing(c) { "thing" } else { "stuff" },
            taxonomy.canonical_raw(c).unwrap_or_default()
        );
    }
    for (&raw, &class) in taxonomy.raw_map() {
        if raw == 0 || (class < k && taxonomy.canonical_raw(class) == Some(raw)) {
            continue;
        }
        let target = if taxonomy.is_ignore(class) {
            "ignore"
        } else {
            taxonomy.name(class).unwrap_or_default()
        };
        let _ = writeln!(out, "map {raw} {target}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_round_trip() {
        let t = ClassTaxonomy::semantic_kitti();
        let text = taxonomy_to_text(&t);
        assert_eq!(parse_taxonomy(&text).unwrap(), t);
    }

    #[test]
    fn small_file() {
        let t = parse_taxonomy(
            "# two classes\nignore 9\nclass car thing 10\nclass road stuff 40\nmap 60 road\nmap 1 ignore\n",
        )
        .unwrap();
        assert_eq!(t.num_classes(), 2);
        assert_eq!(t.decode(60).semantic, 1);
        assert_eq!(t.decode(1).semantic, 9);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_taxonomy("ignore 9\nclass car maybe 10\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_taxonomy("ignore 9\nclass car thing 10\nmap 3 truck\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_taxonomy("class car thing 10\n").is_err());
    }
}
